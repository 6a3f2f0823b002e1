"""Frame alignment: optical-flow and temporal-grouping schemes.

The optical-flow module (OFM) warps neighbours onto the reference frame with
a pluggable flow estimator and fuses them with a shared conv stack.  The
temporal-grouping module (TGM) splits the window into two frame-rate groups,
encodes each frame with a shared residual encoder, pools per group, and
fuses the concatenated group features.  A two-way softmax over macro logits
mixes the two schemes during search.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from . import FormatError
from .config import FlowConfig
from .data import FrameWindow, luminance
from .searchspace import ResidualBlock

FLOW_MAGIC = b"FLO2"


# ---------------------------------------------------------------------------
# Flow file format: magic "FLO2", int32 H, int32 W (little endian), then
# H*W*2 float32 row-major with (u, v) interleaved per pixel.


def write_flow_file(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2); got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<ii", h, w))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flow_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLOW_MAGIC:
            raise FormatError(f"{path}: bad flow-file magic {magic!r}")
        h, w = struct.unpack("<ii", fh.read(8))
        if h <= 0 or w <= 0:
            raise FormatError(f"{path}: invalid dimensions {h}x{w}")
        payload = fh.read(h * w * 2 * 4)
        if len(payload) != h * w * 2 * 4:
            raise FormatError(f"{path}: truncated flow payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).copy()


# ---------------------------------------------------------------------------
# Flow estimation


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


class PyramidFlowEstimator:
    """Coarse-to-fine iterative least-squares flow (brightness constancy).

    Deterministic for fixed inputs; textureless regions regularise to zero
    displacement.
    """

    def __init__(self, cfg: FlowConfig = FlowConfig()):
        self.cfg = cfg

    def estimate(self, ref, nbr, key=None) -> np.ndarray:
        ref_l = luminance(ref)
        nbr_l = luminance(nbr)
        if ref_l.shape != nbr_l.shape:
            raise ValueError(f"shape mismatch: {ref_l.shape} vs {nbr_l.shape}")
        levels = [(ref_l, nbr_l)]
        for _ in range(self.cfg.levels - 1):
            r, n = levels[-1]
            if min(r.shape) < 16:
                break
            levels.append((_downsample(r), _downsample(n)))
        flow = np.zeros(levels[-1][0].shape + (2,), dtype=np.float64)
        for r, n in reversed(levels):
            if flow.shape[:2] != r.shape:
                flow = 2.0 * np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)
                flow = flow[: r.shape[0], : r.shape[1]]
                pad_y = r.shape[0] - flow.shape[0]
                pad_x = r.shape[1] - flow.shape[1]
                if pad_y or pad_x:
                    flow = np.pad(flow, ((0, pad_y), (0, pad_x), (0, 0)), mode="edge")
            flow = self._refine(r, n, flow)
        return flow.astype(np.float32)

    def _refine(self, ref, nbr, flow):
        h, w = ref.shape
        gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        size = self.cfg.window
        ridge = self.cfg.ridge
        for _ in range(self.cfg.iterations):
            warped = _bilinear_sample(nbr, gy + flow[:, :, 1], gx + flow[:, :, 0])
            iy, ix = np.gradient(warped)
            it = warped - ref
            sxx = ndimage.uniform_filter(ix * ix, size=size, mode="nearest") + ridge
            syy = ndimage.uniform_filter(iy * iy, size=size, mode="nearest") + ridge
            sxy = ndimage.uniform_filter(ix * iy, size=size, mode="nearest")
            sxt = ndimage.uniform_filter(ix * it, size=size, mode="nearest")
            syt = ndimage.uniform_filter(iy * it, size=size, mode="nearest")
            det = sxx * syy - sxy * sxy
            du = (-syy * sxt + sxy * syt) / det
            dv = (sxy * sxt - sxx * syt) / det
            flow = flow + np.stack([du, dv], axis=-1)
        return flow


def estimate_flow(ref, nbr, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """One-shot flow estimate with the built-in pyramid estimator."""
    return PyramidFlowEstimator(cfg).estimate(ref, nbr)


class PrecomputedFlowEstimator:
    """Serve flow fields from per-pair files on disk.

    Files are named ``flow_<ref>_<nbr>.flo2`` with absolute frame indices;
    the caller must supply the ``key=(ref_index, nbr_index)`` pair.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"flow directory not found: {self.directory}")

    def path_for(self, ref_index: int, nbr_index: int) -> Path:
        return self.directory / f"flow_{ref_index:04d}_{nbr_index:04d}.flo2"

    def estimate(self, ref, nbr, key=None) -> np.ndarray:
        if key is None:
            raise ValueError("precomputed flow requires a (ref_index, nbr_index) key")
        path = self.path_for(*key)
        if not path.exists():
            raise FileNotFoundError(f"no precomputed flow at {path}")
        return read_flow_file(path)


# ---------------------------------------------------------------------------
# Warping


def warp(frame: torch.Tensor, flow) -> torch.Tensor:
    """Backward-warp a frame: output(p) = frame(p + flow(p)), border-clamped.

    `frame` is (C, H, W) or (B, C, H, W); `flow` is (H, W, 2) with (u, v)
    displacements in pixels.  Bilinear sampling; differentiable in `frame`.
    """
    squeeze = frame.ndim == 3
    if squeeze:
        frame = frame[None]
    b, c, h, w = frame.shape
    if isinstance(flow, np.ndarray):
        flow = torch.from_numpy(np.ascontiguousarray(flow))
    flow = flow.to(frame.dtype)
    if flow.shape != (h, w, 2):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match frame {h}x{w}")
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=frame.dtype),
        torch.arange(w, dtype=frame.dtype),
        indexing="ij",
    )
    xs = torch.clamp(gx + flow[:, :, 0], 0.0, w - 1.0)
    ys = torch.clamp(gy + flow[:, :, 1], 0.0, h - 1.0)
    x0 = xs.floor().long()
    y0 = ys.floor().long()
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)
    wx = (xs - x0).reshape(1, 1, h, w)
    wy = (ys - y0).reshape(1, 1, h, w)

    flat = frame.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(1, 1, h * w).expand(b, c, -1)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Temporal grouping


def group_offsets(w: int):
    """Window-index groups: even offsets (with reference) and odd offsets plus reference."""
    if w % 2 != 1:
        raise ValueError(f"window size must be odd; got {w}")
    half = (w - 1) // 2
    even = [i for i in range(w) if (i - half) % 2 == 0]
    odd = sorted({i for i in range(w) if (i - half) % 2 != 0} | {half})
    return even, odd


def group_frames(win: FrameWindow):
    """Split a window into the two frame-rate groups, temporally ordered."""
    even, odd = group_offsets(len(win))
    return ([win.frames[i] for i in even], [win.frames[i] for i in odd])


# ---------------------------------------------------------------------------
# Alignment module


class AlignmentModule(nn.Module):
    """Shared per-frame encoder plus the two fusion heads and their mixture.

    Input frames are shaped (B, T, 3, H, W) with the reference at index
    (T-1)//2; every path outputs a (B, 3, H, W) frame-shaped map.
    """

    def __init__(self, hidden: int, flow_estimator=None):
        super().__init__()
        self.encoder = ResidualBlock(3, hidden=hidden)
        self.ofm_fuse = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        self.tgm_fuse = nn.Conv2d(6, 3, 1)
        self.flow_estimator = flow_estimator or PyramidFlowEstimator()

    def _check(self, frames: torch.Tensor) -> int:
        if frames.ndim != 5 or frames.shape[2] != 3:
            raise ValueError(f"expected (B, T, 3, H, W) frames; got {tuple(frames.shape)}")
        t = frames.shape[1]
        if t % 2 != 1:
            raise ValueError(f"window length must be odd; got {t}")
        return (t - 1) // 2

    def align_ofm(self, frames: torch.Tensor, keys=None) -> torch.Tensor:
        """Warp each neighbour onto the reference, encode, pool, fuse, add reference."""
        ref_idx = self._check(frames)
        b, t = frames.shape[:2]
        frames_np = frames.detach().cpu().numpy().transpose(0, 1, 3, 4, 2)
        aligned = []
        for j in range(t):
            if j == ref_idx:
                aligned.append(frames[:, j])
                continue
            warped = []
            for i in range(b):
                key = None
                if keys is not None and keys[i] is not None:
                    key = (keys[i][ref_idx], keys[i][j])
                flow = self.flow_estimator.estimate(frames_np[i, ref_idx], frames_np[i, j], key=key)
                warped.append(warp(frames[i, j], flow))
            aligned.append(torch.stack(warped))
        stack = torch.stack(aligned, dim=1)  # (B, T, 3, H, W)
        feats = self.encoder(stack.reshape(b * t, *stack.shape[2:]))
        feats = feats.reshape(b, t, *stack.shape[2:]).mean(dim=1)
        return frames[:, ref_idx] + self.ofm_fuse(feats)

    def align_tgm(self, frames: torch.Tensor) -> torch.Tensor:
        """Encode both frame-rate groups with shared weights, pool, concatenate, fuse."""
        ref_idx = self._check(frames)
        b, t = frames.shape[:2]
        even, odd = group_offsets(t)
        feats = self.encoder(frames.reshape(b * t, *frames.shape[2:]))
        feats = feats.reshape(b, t, *frames.shape[2:])
        g1 = feats[:, even].mean(dim=1)
        g2 = feats[:, odd].mean(dim=1)
        return frames[:, ref_idx] + self.tgm_fuse(torch.cat([g1, g2], dim=1))

    def align_mixed(self, frames: torch.Tensor, macro_logits: torch.Tensor, keys=None) -> torch.Tensor:
        """Softmax-weighted mixture of the two alignment schemes."""
        weights = torch.softmax(macro_logits, dim=-1)
        return weights[0] * self.align_ofm(frames, keys) + weights[1] * self.align_tgm(frames)

    def forward(self, frames: torch.Tensor, macro: str, macro_logits=None, keys=None) -> torch.Tensor:
        if macro == "ofm":
            return self.align_ofm(frames, keys)
        if macro == "tgm":
            return self.align_tgm(frames)
        if macro == "mixed":
            if macro_logits is None:
                raise ValueError("mixed alignment requires macro logits")
            return self.align_mixed(frames, macro_logits, keys)
        raise ValueError(f"unknown alignment scheme {macro!r}")
