"""Task and architecture losses plus fidelity metrics.

The task loss is negative mean structural similarity plus a weighted mean
absolute error.  The architecture loss adds an entropy regulariser over the
softmaxed operation logits, which gradually suppresses weak candidates.
Evaluation metrics (PSNR and SSIM) are computed on the BT.601 luminance
channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import Frame, luminance


@dataclass(frozen=True)
class LossConfig:
    rho: float = 0.75           # L1 weight in the task loss
    eta: float = 0.01           # entropy-regulariser weight in the architecture loss
    window: int = 11            # Gaussian SSIM window size (odd)
    sigma: float = 1.5          # Gaussian SSIM window sigma
    k1: float = 0.01            # SSIM stability constant
    k2: float = 0.03
    dynamic_range: float = 1.0  # pixel value range ([0, 1] data)

    def __post_init__(self):
        if self.rho < 0 or self.eta < 0:
            raise ValueError("rho and eta must be nonnegative")
        if self.window % 2 != 1:
            raise ValueError("SSIM window must be odd")


DEFAULT_LOSS = LossConfig()


def gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _as_bchw(x) -> torch.Tensor:
    if isinstance(x, Frame):
        x = x.pixels
    if isinstance(x, np.ndarray):
        if x.ndim == 2:
            x = x[:, :, None]
        x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))).double()
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected an image tensor, got shape {tuple(x.shape)}")
    return x


def ssim(x, y, cfg: LossConfig = DEFAULT_LOSS) -> torch.Tensor:
    """Mean local SSIM over Gaussian windows, averaged across channels.

    Accepts frames or tensors shaped (H, W), (C, H, W) or (B, C, H, W);
    values are used as-is (no clipping).
    """
    x, y = _as_bchw(x), _as_bchw(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < cfg.window:
        raise ValueError(f"frames must be at least {cfg.window} pixels per side for SSIM")
    channels = x.shape[1]
    win = gaussian_window(cfg.window, cfg.sigma).to(x.dtype)
    win = win[None, None].expand(channels, 1, -1, -1)
    conv = lambda t: torch.nn.functional.conv2d(t, win, groups=channels)

    mu_x, mu_y = conv(x), conv(y)
    sigma_x = conv(x * x) - mu_x * mu_x
    sigma_y = conv(y * y) - mu_y * mu_y
    sigma_xy = conv(x * y) - mu_x * mu_y
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    s = ((2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    )
    return s.mean()


def task_loss(x, y, cfg: LossConfig = DEFAULT_LOSS) -> torch.Tensor:
    """Negative batch-mean SSIM plus `rho` times the mean absolute error."""
    xt, yt = _as_bchw(x), _as_bchw(y)
    if xt.shape != yt.shape:
        raise ValueError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(yt.shape)}")
    return -ssim(xt, yt, cfg) + cfg.rho * (xt - yt).abs().mean()


def entropy_reg(micro_logits) -> torch.Tensor:
    """Sum of Shannon entropies (natural log) of the per-node softmax rows."""
    logits = micro_logits if isinstance(micro_logits, torch.Tensor) else torch.as_tensor(micro_logits)
    p = torch.softmax(logits, dim=-1)
    return -torch.special.xlogy(p, p).sum()


def arch_loss(task_val_loss, micro_logits, cfg: LossConfig = DEFAULT_LOSS) -> torch.Tensor:
    """Validation task loss plus `eta` times the logits' entropy."""
    reg = entropy_reg(micro_logits)
    if not isinstance(task_val_loss, torch.Tensor):
        task_val_loss = torch.as_tensor(task_val_loss, dtype=reg.dtype)
    return task_val_loss + cfg.eta * reg


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB on the luminance channel.

    Identical inputs yield ``math.inf``.
    """
    lx = luminance(x) if _channels(x) == 3 else np.asarray(_array(x), dtype=np.float64)
    ly = luminance(y) if _channels(y) == 3 else np.asarray(_array(y), dtype=np.float64)
    if lx.shape != ly.shape:
        raise ValueError(f"shape mismatch: {lx.shape} vs {ly.shape}")
    mse = float(np.mean((lx - ly) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _array(x) -> np.ndarray:
    return x.pixels if isinstance(x, Frame) else np.asarray(x)


def _channels(x) -> int:
    arr = _array(x)
    return arr.shape[2] if arr.ndim == 3 else 1


def ssim_luminance(x, y, cfg: LossConfig = DEFAULT_LOSS) -> float:
    """Evaluation-time SSIM on the luminance channel."""
    return float(ssim(luminance(x), luminance(y), cfg))
