"""Differentiable micro search space.

Eight shape-preserving candidate operations, softmax-relaxed mixed layers,
four-node cells with a cell-level identity skip, and derivation of the
discrete genotype from the relaxed logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import ConfigurationError

OP_IDS = (
    "res3",
    "res5",
    "dense3",
    "dense5",
    "attn_spatial",
    "attn_channel",
    "dil3",
    "dil5",
)

NODES_PER_CELL = 4


def _bn(channels):
    # Batch statistics are always used (no running averages): forwards stay
    # pure and deterministic; at batch size 1 this degrades to instance
    # statistics.
    return nn.BatchNorm2d(channels, affine=True, track_running_stats=False)


def _conv_bn_relu(c_in, c_out, kernel_size, dilation=1):
    pad = dilation * (kernel_size - 1) // 2
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size, padding=pad, dilation=dilation),
        _bn(c_out),
        nn.ReLU(),
    )


class ResidualBlock(nn.Module):
    """Three conv-norm-activation layers plus an identity skip.

    Zeroing the last convolution makes the block an exact identity.
    """

    def __init__(self, channels, hidden=None, kernel_size=3):
        super().__init__()
        hidden = hidden or channels
        self.layers = nn.ModuleList([
            _conv_bn_relu(channels, hidden, kernel_size),
            _conv_bn_relu(hidden, hidden, kernel_size),
            _conv_bn_relu(hidden, channels, kernel_size),
        ])

    def forward(self, x):
        h = x
        for layer in self.layers:
            h = layer(h)
        return x + h


class DenseBlock(nn.Module):
    """Three convolutions with concatenative connectivity, projected back to C."""

    def __init__(self, channels, kernel_size=3):
        super().__init__()
        self.layers = nn.ModuleList([
            _conv_bn_relu(channels, channels, kernel_size),
            _conv_bn_relu(2 * channels, channels, kernel_size),
            _conv_bn_relu(3 * channels, channels, kernel_size),
        ])

    def forward(self, x):
        f1 = self.layers[0](x)
        f2 = self.layers[1](torch.cat([x, f1], dim=1))
        return self.layers[2](torch.cat([x, f1, f2], dim=1))


class SpatialGate(nn.Module):
    """Per-pixel gating mask in [0, 1] multiplying the input."""

    def __init__(self, channels, kernel_size=3):
        super().__init__()
        self.layers = nn.ModuleList([
            _conv_bn_relu(channels, channels, kernel_size),
            _conv_bn_relu(channels, channels, kernel_size),
        ])
        self.mask_conv = nn.Conv2d(channels, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        h = self.layers[1](self.layers[0](x))
        return x * torch.sigmoid(self.mask_conv(h))


class ChannelGate(nn.Module):
    """Squeeze-and-excite style per-channel gating in [0, 1]."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        squeezed = max(1, channels // reduction)
        self.feature = _conv_bn_relu(channels, channels, 3)
        self.reduce = nn.Conv2d(channels, squeezed, 1)
        self.expand = nn.Conv2d(squeezed, channels, 1)

    def forward(self, x):
        h = self.feature(x).mean(dim=(-2, -1), keepdim=True)
        gate = torch.sigmoid(self.expand(F.relu(self.reduce(h))))
        return x * gate

    def force_open(self):
        """Pin the gate to exactly 1 (float32 sigmoid saturates); identity op."""
        with torch.no_grad():
            self.expand.weight.zero_()
            self.expand.bias.fill_(30.0)
        return self


class DilatedBlock(nn.Module):
    """Three dilated convolutions (dilation factor 2)."""

    def __init__(self, channels, kernel_size=3, dilation=2):
        super().__init__()
        self.layers = nn.ModuleList([
            _conv_bn_relu(channels, channels, kernel_size, dilation)
            for _ in range(3)
        ])

    def forward(self, x):
        h = x
        for layer in self.layers:
            h = layer(h)
        return h


def build_op(op_id: str, channels: int) -> nn.Module:
    if op_id == "res3":
        return ResidualBlock(channels, kernel_size=3)
    if op_id == "res5":
        return ResidualBlock(channels, kernel_size=5)
    if op_id == "dense3":
        return DenseBlock(channels, kernel_size=3)
    if op_id == "dense5":
        return DenseBlock(channels, kernel_size=5)
    if op_id == "attn_spatial":
        return SpatialGate(channels)
    if op_id == "attn_channel":
        return ChannelGate(channels)
    if op_id == "dil3":
        return DilatedBlock(channels, kernel_size=3)
    if op_id == "dil5":
        return DilatedBlock(channels, kernel_size=5)
    raise ValueError(f"unknown operation id {op_id!r}")


def apply_candidate(op_id: str, x, params) -> torch.Tensor:
    """Run one named candidate, looked up in a node's operation mapping."""
    if op_id not in OP_IDS:
        raise ValueError(f"unknown operation id {op_id!r}")
    if op_id not in params:
        raise ConfigurationError(f"node has no parameters for operation {op_id!r}")
    return params[op_id](x)


def mixed_layer(x, node_logits, params) -> torch.Tensor:
    """Softmax-weighted sum of all eight candidate outputs at one node."""
    weights = torch.softmax(node_logits, dim=-1)
    out = None
    for i, op_id in enumerate(OP_IDS):
        term = weights[i] * params[op_id](x)
        out = term if out is None else out + term
    return out


def cell_forward(x, micro_logits, nodes) -> torch.Tensor:
    """Chain of four mixed layers plus an identity skip from the cell input."""
    h = x
    for node_logits, node in zip(micro_logits, nodes):
        h = mixed_layer(h, node_logits, node)
    return h + x


def discrete_forward(x, spec: "CellSpec", nodes) -> torch.Tensor:
    """Chain of the four named operations with the same skip topology."""
    h = x
    for op_id, node in zip(spec.ops, nodes):
        if op_id not in node:
            raise ConfigurationError(f"node has no parameters for operation {op_id!r}")
        h = node[op_id](h)
    return h + x


@dataclass(frozen=True)
class CellSpec:
    """Derived discrete genotype: an ordered list of four operation ids."""

    ops: tuple

    def __post_init__(self):
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        if len(ops) != NODES_PER_CELL:
            raise ValueError(f"a cell spec names exactly {NODES_PER_CELL} operations; got {len(ops)}")
        for op in ops:
            if op not in OP_IDS:
                raise ValueError(f"unknown operation id {op!r}")

    def to_line(self) -> str:
        return ",".join(self.ops)

    @classmethod
    def from_line(cls, line: str) -> "CellSpec":
        return cls(tuple(part.strip() for part in line.strip().split(",")))


LIGHT_SPEC = CellSpec(("res3", "attn_spatial", "dil3", "attn_channel"))
HEAVY_SPEC = CellSpec(("res5", "attn_spatial", "attn_channel", "res3"))


def derive_cell(micro_logits) -> CellSpec:
    """Per-node argmax over softmax weights; ties break to the lowest op index."""
    logits = torch.as_tensor(micro_logits).detach()
    if not torch.all(torch.isfinite(logits)):
        raise ValueError("architecture logits must be finite")
    weights = torch.softmax(logits.double(), dim=-1)
    picks = weights.argmax(dim=-1)  # argmax returns the first maximal index
    return CellSpec(tuple(OP_IDS[int(i)] for i in picks))


class MixedCell(nn.Module):
    """Relaxed cell: every node holds parameters for all eight candidates."""

    def __init__(self, channels):
        super().__init__()
        self.nodes = nn.ModuleList([
            nn.ModuleDict({op_id: build_op(op_id, channels) for op_id in OP_IDS})
            for _ in range(NODES_PER_CELL)
        ])

    def forward(self, x, micro_logits):
        return cell_forward(x, micro_logits, self.nodes)


class DiscreteCell(nn.Module):
    """Derived cell: one operation per node."""

    def __init__(self, channels, spec: CellSpec):
        super().__init__()
        self.spec = spec
        self.nodes = nn.ModuleList([
            nn.ModuleDict({op_id: build_op(op_id, channels)}) for op_id in spec.ops
        ])

    @classmethod
    def from_mixed(cls, cell: MixedCell, spec: CellSpec) -> "DiscreteCell":
        """Reuse the mixed cell's parameter modules for the chosen operations."""
        derived = cls.__new__(cls)
        nn.Module.__init__(derived)
        derived.spec = spec
        derived.nodes = nn.ModuleList([
            nn.ModuleDict({op_id: mixed_node[op_id]})
            for op_id, mixed_node in zip(spec.ops, cell.nodes)
        ])
        return derived

    def forward(self, x, micro_logits=None):
        return discrete_forward(x, self.spec, self.nodes)
