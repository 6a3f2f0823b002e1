"""Collaborative restoration branches and their attention-based fusion.

The dominant branch (DNA) restores synthetically hardened frames; the
companionate branch (CNA) restores the aligned frames directly.  Both share
one table of relaxed operation logits during search.  A fusion-attention
head scores the two restored frames through shared convolutions and global
average pooling; a per-channel two-way softmax yields the mixing weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
from torch import nn

from . import ConfigurationError
from .alignment import AlignmentModule, PyramidFlowEstimator
from .config import ExperimentConfig
from .rainmodel import augment_frame, make_kernel_bank
from .searchspace import (
    NODES_PER_CELL,
    OP_IDS,
    CellSpec,
    DiscreteCell,
    MixedCell,
    ResidualBlock,
    derive_cell,
)

__all__ = [
    "Branch",
    "ForwardOutputs",
    "FusionAttention",
    "FusionWeights",
    "ResidualBlock",
    "TripleModel",
    "aas_weights",
    "build_model",
    "fuse",
]


class FusionWeights(NamedTuple):
    """Per-channel convex mixing weights for the two restored frames."""

    dominant: torch.Tensor   # (B, 3)
    companion: torch.Tensor  # (B, 3)


class FusionAttention(nn.Module):
    """Shared conv stack + global average pooling + two-way softmax.

    The final convolution starts at zero so fusion begins as an exact 0.5/0.5
    average and learns to deviate during fine-tuning.
    """

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 3, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(x))).mean(dim=(-2, -1))

    def forward(self, dominant: torch.Tensor, companion: torch.Tensor) -> FusionWeights:
        if dominant.shape != companion.shape:
            raise ValueError(f"shape mismatch: {tuple(dominant.shape)} vs {tuple(companion.shape)}")
        stacked = torch.stack([self.scores(dominant), self.scores(companion)])
        lam = torch.softmax(stacked, dim=0)
        return FusionWeights(lam[0], lam[1])


def aas_weights(dominant, companion, params: FusionAttention) -> FusionWeights:
    return params(dominant, companion)


def fuse(dominant: torch.Tensor, companion: torch.Tensor, weights: FusionWeights) -> torch.Tensor:
    """Per-channel convex combination of the two restored frames."""
    if dominant.shape != companion.shape:
        raise ValueError(f"shape mismatch: {tuple(dominant.shape)} vs {tuple(companion.shape)}")
    wd = weights.dominant.reshape(*weights.dominant.shape, 1, 1)
    wc = weights.companion.reshape(*weights.companion.shape, 1, 1)
    return wd * dominant + wc * companion


def uniform_fusion(dominant: torch.Tensor) -> FusionWeights:
    half = dominant.new_full((dominant.shape[0], 3), 0.5)
    return FusionWeights(half, half)


class Branch(nn.Module):
    """One restoration branch: stem, cascaded cells, head, global rain skip.

    The network predicts a rain residual; the output is input minus residual,
    optionally clamped to [0, 1] (clamping is for inference, losses consume
    the raw output).
    """

    def __init__(self, channels: int, cells: int, spec: Optional[CellSpec] = None):
        super().__init__()
        self.spec = spec
        self.stem = nn.Conv2d(3, channels, 3, padding=1)
        if spec is None:
            self.cells = nn.ModuleList([MixedCell(channels) for _ in range(cells)])
        else:
            self.cells = nn.ModuleList([DiscreteCell(channels, spec) for _ in range(cells)])
        self.head = nn.Conv2d(channels, 3, 3, padding=1)

    @property
    def relaxed(self) -> bool:
        return self.spec is None

    def forward(self, x: torch.Tensor, micro_logits=None, clamp: bool = True) -> torch.Tensor:
        if self.relaxed and micro_logits is None:
            raise ConfigurationError("a relaxed branch needs operation logits")
        if not self.relaxed and micro_logits is not None:
            raise ConfigurationError("a discrete branch takes no operation logits")
        h = self.stem(x)
        for cell in self.cells:
            h = cell(h, micro_logits) if self.relaxed else cell(h)
        out = x - self.head(h)
        return torch.clamp(out, 0.0, 1.0) if clamp else out

    def zero_head_(self) -> "Branch":
        """Make the branch an exact identity (restores its input unchanged)."""
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self


@dataclass
class ForwardOutputs:
    """Everything the losses need from one full forward pass."""

    fused: torch.Tensor
    dominant: torch.Tensor
    companion: torch.Tensor
    fusion: FusionWeights
    augmented: torch.Tensor
    aligned: torch.Tensor


class TripleModel(nn.Module):
    """Alignment, rain hardening, the two branches, and fusion, end to end."""

    def __init__(self, cfg: ExperimentConfig, flow_estimator=None):
        super().__init__()
        m = cfg.model
        self.macro = m.macro
        self.use_gars = m.use_gars
        spec = CellSpec.from_line(m.cell_spec) if m.cell_spec else None
        self.micro_logits = nn.Parameter(torch.zeros(NODES_PER_CELL, len(OP_IDS)))
        self.macro_logits = nn.Parameter(torch.zeros(2))
        self.align = AlignmentModule(m.align_channels, flow_estimator)
        self.bank = make_kernel_bank(cfg.rain)
        self.coarse_rain = ResidualBlock(3, hidden=m.gars_channels)
        self.dna = Branch(m.channels, m.cells, spec)
        self.cna = Branch(m.channels, m.cells, spec)
        self.aas = FusionAttention(m.aas_channels)

    @property
    def relaxed(self) -> bool:
        return self.dna.relaxed

    def weight_parameters(self):
        """Everything trained in the weight step (branches, bank, estimator, alignment)."""
        skip = {id(self.micro_logits), id(self.macro_logits)}
        skip.update(id(p) for p in self.aas.parameters())
        return [p for p in self.parameters() if id(p) not in skip]

    def arch_parameters(self):
        return [self.micro_logits, self.macro_logits]

    def aas_parameters(self):
        return list(self.aas.parameters())

    def derive_spec(self) -> CellSpec:
        return derive_cell(self.micro_logits)

    def forward(self, windows: torch.Tensor, *, use_aas: bool = True,
                clamp: bool = False, keys=None) -> ForwardOutputs:
        """Full pass over a batch of windows shaped (B, T, 3, H, W)."""
        logits = self.micro_logits if self.relaxed else None
        aligned = self.align(windows, self.macro, self.macro_logits, keys=keys)
        if self.use_gars:
            augmented = augment_frame(aligned, self.bank, self.coarse_rain)
        else:
            augmented = aligned
        dominant = self.dna(augmented, logits, clamp=clamp)
        companion = self.cna(aligned, logits, clamp=clamp)
        weights = self.aas(dominant, companion) if use_aas else uniform_fusion(dominant)
        fused = fuse(dominant, companion, weights)
        if clamp:
            fused = torch.clamp(fused, 0.0, 1.0)
        return ForwardOutputs(fused, dominant, companion, weights, augmented, aligned)


def build_model(cfg: ExperimentConfig, flow_estimator=None) -> TripleModel:
    if flow_estimator is None:
        flow_estimator = PyramidFlowEstimator(cfg.flow)
    return TripleModel(cfg, flow_estimator)


def identity_init(model: TripleModel) -> TripleModel:
    """Zero the residual heads so the pipeline reproduces its input exactly.

    Requires a model built with rain hardening disabled (``model.use_gars``
    False), since the hardening path adds rain to the dominant input.
    """
    model.dna.zero_head_()
    model.cna.zero_head_()
    with torch.no_grad():
        model.align.ofm_fuse[-1].weight.zero_()
        model.align.ofm_fuse[-1].bias.zero_()
        model.align.tgm_fuse.weight.zero_()
        model.align.tgm_fuse.bias.zero_()
    return model
