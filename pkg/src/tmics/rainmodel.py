"""Composite rain model and the auxiliary rain-streak generator.

The composite model blends plain additive rain with kernel-filtered rain
under per-pixel weights.  The generator convolves a coarsely estimated rain
residual with a bank of line-streak kernels (two groups: short/blurred and
long) and adds the residual back, producing the hardened frame fed to the
dominant restoration branch.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RainConfig
from .data import Frame


def line_kernel(size: int, angle_deg: float, length: float, sigma: float) -> np.ndarray:
    """Anti-aliased line-segment kernel, normalised to unit sum.

    The segment is centred, `length` pixels long at `angle_deg` degrees from
    the horizontal axis, with a Gaussian cross-profile of width `sigma`.
    """
    if size % 2 != 1:
        raise ValueError(f"kernel size must be odd; got {size}")
    if size == 1:
        return np.ones((1, 1), dtype=np.float64)
    half = (size - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(size) - half, np.arange(size) - half, indexing="ij")
    dy = 0.5 * max(length - 1.0, 0.0) * math.sin(math.radians(angle_deg))
    dx = 0.5 * max(length - 1.0, 0.0) * math.cos(math.radians(angle_deg))
    norm2 = dy * dy + dx * dx
    if norm2 == 0.0:
        dist = np.hypot(ys, xs)
    else:
        t = np.clip((ys * dy + xs * dx) / norm2, -1.0, 1.0)
        dist = np.hypot(ys - t * dy, xs - t * dx)
    kernel = np.exp(-(dist ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


class KernelBank(nn.Module):
    """Fixed streak kernels with learnable per-kernel scalar weights."""

    def __init__(self, kernels, group_ids):
        super().__init__()
        kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
        if len(kernels) < 1:
            raise ValueError("a kernel bank needs at least one kernel")
        if len(kernels) != len(group_ids):
            raise ValueError("one group id per kernel required")
        for k in kernels:
            if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 != 1:
                raise ValueError(f"kernels must be odd and square; got shape {k.shape}")
            if k.min() < 0.0:
                raise ValueError("kernels must be nonnegative")
            if abs(k.sum() - 1.0) > 1e-6:
                raise ValueError(f"kernels must sum to 1; got {k.sum():.8f}")
        group_ids = tuple(int(g) for g in group_ids)
        if any(g not in (0, 1) for g in group_ids):
            raise ValueError("group ids must be 0 or 1")
        if len(kernels) >= 2 and len(set(group_ids)) != 2:
            raise ValueError("a bank of two or more kernels must cover both groups")
        self.group_ids = group_ids
        for i, k in enumerate(kernels):
            self.register_buffer(f"kernel_{i}", torch.from_numpy(k).float())
        self.weights = nn.Parameter(torch.full((len(kernels),), 1.0 / len(kernels)))

    def __len__(self):
        return len(self.group_ids)

    def kernel(self, i) -> torch.Tensor:
        return getattr(self, f"kernel_{i}")

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """Weighted sum of reflect-padded per-channel convolutions of `x`."""
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        channels = x.shape[1]
        weights = self.weights.to(x.dtype)
        out = torch.zeros_like(x)
        for i in range(len(self)):
            k = self.kernel(i).to(x.dtype)
            pad = k.shape[0] // 2
            weight = k[None, None].expand(channels, 1, -1, -1)
            conv = F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="reflect"),
                            weight, groups=channels)
            out = out + weights[i] * conv
        return out[0] if squeeze else out


def make_kernel_bank(cfg: RainConfig) -> KernelBank:
    """Two kernel groups: short blurred streaks and long thin streaks."""
    if cfg.kernels < 1:
        raise ValueError("rain.kernels must be at least 1")
    if cfg.small_size % 2 == 0 or cfg.large_size % 2 == 0:
        raise ValueError("kernel sizes must be odd")
    n_small = max(1, cfg.kernels // 2) if cfg.kernels > 1 else 1
    n_large = cfg.kernels - n_small
    kernels, group_ids = [], []
    for group, count, size, length, sigma in (
        (0, n_small, cfg.small_size, cfg.small_length, cfg.small_sigma),
        (1, n_large, cfg.large_size, cfg.large_length, cfg.large_sigma),
    ):
        if count == 0:
            continue
        angles = np.linspace(-cfg.angle_span / 2.0, cfg.angle_span / 2.0, count)
        for angle in angles:
            kernels.append(line_kernel(size, float(angle), length, sigma))
            group_ids.append(group)
    return KernelBank(kernels, group_ids)


def _pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame)


def compose_rainy(background, rain, lam, bank: KernelBank) -> Frame:
    """Blend plain and kernel-filtered additive rain under per-pixel weights.

    Returns ``clip(lam * (B + R) + (1 - lam) * (B + bank(R)), 0, 1)``.
    """
    b = _pixels(background).astype(np.float64)
    r = _pixels(rain).astype(np.float64)
    if b.shape != r.shape:
        raise ValueError(f"background {b.shape} and rain {r.shape} shapes differ")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 2:
        lam = lam[:, :, None]
    if lam.size > 1 and lam.shape[:2] != b.shape[:2]:
        raise ValueError(f"weight map shape {lam.shape} does not match frames {b.shape}")
    if lam.min() < 0.0 or lam.max() > 1.0:
        raise ValueError("per-pixel weights must lie in [0, 1]")
    with torch.no_grad():
        r_t = torch.from_numpy(np.ascontiguousarray(r.transpose(2, 0, 1)))
        filtered = bank.apply(r_t).numpy().transpose(1, 2, 0)
    out = lam * (b + r) + (1.0 - lam) * (b + filtered)
    return Frame(np.clip(out, 0.0, 1.0).astype(np.float32))


def estimate_coarse_rain(x: torch.Tensor, estimator: nn.Module) -> torch.Tensor:
    """Residual-block forward pass producing a rough rain map (unclipped)."""
    return estimator(x)


def generate_aux_rain(coarse: torch.Tensor, bank: KernelBank) -> torch.Tensor:
    """Kernel-expanded rain: weighted filtered copies plus the coarse map itself."""
    return bank.apply(coarse) + coarse


def augment_frame(x: torch.Tensor, bank: KernelBank, estimator: nn.Module) -> torch.Tensor:
    """Harden a frame with generated auxiliary rain, clipped back to [0, 1]."""
    return torch.clamp(x + generate_aux_rain(estimate_coarse_rain(x, estimator), bank), 0.0, 1.0)
