"""Frame-sequence ingestion, temporal windowing, synthetic rain, augmentation.

Frames are real arrays of shape (H, W, 3) with values in [0, 1].  Sequences
live on disk as directories of numbered 8-bit PNG/BMP files; a paired
dataset root holds ``rainy/<id>/`` and ``clean/<id>/`` directories with
identical filenames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import FormatError
from .config import SynthConfig

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_IMAGE_SUFFIXES = (".png", ".bmp")


@dataclass(frozen=True)
class Frame:
    """One video frame: float pixels in [0, 1], shape (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"frame pixels must have shape (H, W, 3); got {getattr(px, 'shape', None)}")
        if not np.issubdtype(px.dtype, np.floating):
            raise ValueError(f"frame pixels must be floating point; got {px.dtype}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"frame must be at least 8x8; got {px.shape[0]}x{px.shape[1]}")
        if not np.all(np.isfinite(px)):
            raise ValueError("frame contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class VideoSequence:
    """Temporally ordered frames of a single scene."""

    frames: tuple
    identifier: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) < 1:
            raise ValueError("a sequence needs at least one frame")
        h, w = frames[0].height, frames[0].width
        for f in frames[1:]:
            if f.height != h or f.width != w:
                raise FormatError(
                    f"sequence {self.identifier!r} mixes resolutions: "
                    f"{h}x{w} vs {f.height}x{f.width}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> Frame:
        return self.frames[index]


@dataclass(frozen=True)
class FrameWindow:
    """Odd-length temporal window centred on a reference frame."""

    frames: tuple
    reference_index: int
    ground_truth: Optional[Frame] = None
    source_indices: Optional[tuple] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) % 2 != 1:
            raise ValueError(f"window length must be odd; got {len(frames)}")
        if self.reference_index != (len(frames) - 1) // 2:
            raise ValueError("reference index must be the window centre")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def reference(self) -> Frame:
        return self.frames[self.reference_index]


def load_frame(path) -> Frame:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return Frame(arr.astype(np.float32) / 255.0)


def save_frame(frame: Frame, path) -> None:
    arr = np.clip(np.rint(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_sequence(path) -> VideoSequence:
    """Load every PNG/BMP in `path`, sorted by filename."""
    directory = Path(path)
    if not directory.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise FormatError(f"no frames found in {directory}")
    frames = [load_frame(p) for p in files]
    try:
        return VideoSequence(tuple(frames), identifier=directory.name)
    except FormatError as exc:
        raise FormatError(f"{directory}: {exc}") from None


def save_sequence(seq: VideoSequence, path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    digits = max(3, len(str(len(seq) - 1)))
    for i, frame in enumerate(seq.frames):
        save_frame(frame, directory / f"{i:0{digits}d}.png")


def load_paired_root(root):
    """Load matching ``rainy/<id>`` and ``clean/<id>`` sequence pairs."""
    root = Path(root)
    rainy_dir, clean_dir = root / "rainy", root / "clean"
    if not rainy_dir.is_dir() or not clean_dir.is_dir():
        raise FileNotFoundError(f"expected {root}/rainy and {root}/clean directories")
    pairs = []
    for sub in sorted(p for p in rainy_dir.iterdir() if p.is_dir()):
        mate = clean_dir / sub.name
        if not mate.is_dir():
            raise FormatError(f"rainy sequence {sub.name!r} has no clean counterpart")
        rainy, clean = load_sequence(sub), load_sequence(mate)
        if len(rainy) != len(clean):
            raise FormatError(f"sequence {sub.name!r}: {len(rainy)} rainy vs {len(clean)} clean frames")
        pairs.append((rainy, clean))
    if not pairs:
        raise FormatError(f"no sequence pairs found under {root}")
    return pairs


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index back into [0, n-1] without repeating edges."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return period - i if i >= n else i


def window(seq: VideoSequence, t: int, w: int) -> FrameWindow:
    """Extract the `w`-frame window centred at `t`, reflecting at sequence ends."""
    if w % 2 != 1:
        raise ValueError(f"window size must be odd; got {w}")
    n = len(seq)
    if w > 2 * n - 1:
        raise ValueError(f"window size {w} too large for a {n}-frame sequence")
    if not 0 <= t < n:
        raise ValueError(f"frame index {t} out of range for a {n}-frame sequence")
    half = (w - 1) // 2
    indices = tuple(reflect_index(t + off, n) for off in range(-half, half + 1))
    return FrameWindow(
        frames=tuple(seq.frames[i] for i in indices),
        reference_index=half,
        source_indices=indices,
    )


# ---------------------------------------------------------------------------
# Synthetic rain


def _segment_distance(py, px, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    norm2 = dy * dy + dx * dx
    if norm2 == 0.0:
        return np.hypot(py - y0, px - x0)
    t = np.clip(((py - y0) * dy + (px - x0) * dx) / norm2, 0.0, 1.0)
    return np.hypot(py - (y0 + t * dy), px - (x0 + t * dx))


def _render_streaks(shape, streaks, sigma):
    h, w = shape
    layer = np.zeros((h, w), dtype=np.float64)
    reach = 3.0 * sigma + 1.0
    for cy, cx, angle, length, opacity in streaks:
        dy = 0.5 * length * math.sin(math.radians(angle))
        dx = 0.5 * length * math.cos(math.radians(angle))
        y0, y1 = cy - dy, cy + dy
        x0, x1 = cx - dx, cx + dx
        ylo = max(0, int(math.floor(min(y0, y1) - reach)))
        yhi = min(h, int(math.ceil(max(y0, y1) + reach)) + 1)
        xlo = max(0, int(math.floor(min(x0, x1) - reach)))
        xhi = min(w, int(math.ceil(max(x0, x1) + reach)) + 1)
        if ylo >= yhi or xlo >= xhi:
            continue
        py, px = np.meshgrid(np.arange(ylo, yhi, dtype=np.float64),
                             np.arange(xlo, xhi, dtype=np.float64), indexing="ij")
        dist = _segment_distance(py, px, y0, x0, y1, x1)
        layer[ylo:yhi, xlo:xhi] += opacity * np.exp(-(dist ** 2) / (2.0 * sigma ** 2))
    return layer


def _sample_streaks(rng, params: SynthConfig, h, w):
    count = int(rng.integers(params.count_lo, params.count_hi + 1))
    streaks = []
    for _ in range(count):
        cy = float(rng.uniform(-2.0, h + 2.0))
        cx = float(rng.uniform(-2.0, w + 2.0))
        angle = float(rng.uniform(params.angle_lo, params.angle_hi))
        length = float(rng.uniform(params.length_lo, params.length_hi))
        opacity = float(rng.uniform(params.opacity_lo, params.opacity_hi))
        streaks.append([cy, cx, angle, length, opacity])
    return streaks


def synthesize_rainy(clean: VideoSequence, params: SynthConfig, seed: int):
    """Render additive anti-aliased line streaks over a clean sequence.

    Returns ``(rainy, rain)`` sequences.  The same (sequence, params, seed)
    triple always produces bit-identical output.
    """
    if not 0.0 <= params.opacity_lo <= params.opacity_hi <= 1.0:
        raise ValueError("opacity range must lie within [0, 1]")
    rng = np.random.default_rng(seed)
    h, w = clean.frames[0].height, clean.frames[0].width
    rainy_frames, rain_frames = [], []
    streaks = None
    for k, frame in enumerate(clean.frames):
        if params.independent or streaks is None:
            streaks = _sample_streaks(rng, params, h, w)
        elif k > 0:
            for s in streaks:  # drift the shared field along each streak's axis
                s[0] = (s[0] + 2.0 * math.sin(math.radians(s[2])) + 4.0) % (h + 8.0) - 4.0
                s[1] = (s[1] + 2.0 * math.cos(math.radians(s[2])) + 4.0) % (w + 8.0) - 4.0
        layer = np.clip(_render_streaks((h, w), streaks, params.width), 0.0, 1.0)
        rain = np.repeat(layer[:, :, None], 3, axis=2).astype(np.float32)
        rainy = np.clip(frame.pixels + rain, 0.0, 1.0).astype(np.float32)
        rain_frames.append(Frame(rain))
        rainy_frames.append(Frame(rainy))
    rainy_seq = VideoSequence(tuple(rainy_frames), identifier=clean.identifier)
    rain_seq = VideoSequence(tuple(rain_frames), identifier=clean.identifier)
    return rainy_seq, rain_seq


def generate_clean_sequence(identifier: str, n_frames: int, size: int, seed: int) -> VideoSequence:
    """Procedural rain-free content: drifting gradients plus soft moving shapes.

    Intensities stay below ~0.7 so additive rain has headroom before clipping.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    fy, fx = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    drift = rng.uniform(0.02, 0.08)
    shapes = []
    for _ in range(3):
        shapes.append({
            "cy": rng.uniform(0.15, 0.85) * size,
            "cx": rng.uniform(0.15, 0.85) * size,
            "r": rng.uniform(0.08, 0.2) * size,
            "vy": rng.uniform(-1.5, 1.5),
            "vx": rng.uniform(-1.5, 1.5),
            "color": rng.uniform(0.15, 0.65, size=3),
        })
    py, px = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    frames = []
    for t in range(n_frames):
        base = 0.22 + 0.16 * np.sin(2 * np.pi * (fy * ys + drift * t) + phase[0]) \
                    * np.cos(2 * np.pi * (fx * xs) + phase[1])
        canvas = np.stack([base * s for s in (0.9, 1.0, 1.1)], axis=2)
        for sh in shapes:
            cy = (sh["cy"] + sh["vy"] * t) % size
            cx = (sh["cx"] + sh["vx"] * t) % size
            dist = np.hypot(py - cy, px - cx)
            mask = np.clip(1.0 - (dist / sh["r"]) ** 2, 0.0, 1.0)
            canvas += mask[:, :, None] * sh["color"][None, None, :]
        frames.append(Frame(np.clip(canvas, 0.0, 0.7).astype(np.float32)))
    return VideoSequence(tuple(frames), identifier=identifier)


# ---------------------------------------------------------------------------
# Augmentation


def augment(win: FrameWindow, crop: int, flips, seed: int) -> FrameWindow:
    """Apply one shared random crop and flip decision to every frame in a window.

    `flips` is a ``(horizontal_allowed, vertical_allowed)`` pair; the actual
    flip decisions are drawn from `seed`.
    """
    h, w = win.frames[0].height, win.frames[0].width
    if crop > min(h, w):
        raise ValueError(f"crop {crop} exceeds frame size {h}x{w}")
    allow_h, allow_v = flips
    rng = np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    do_h = bool(allow_h and rng.integers(2))
    do_v = bool(allow_v and rng.integers(2))

    def transform(frame: Frame) -> Frame:
        px = frame.pixels[y0:y0 + crop, x0:x0 + crop]
        if do_h:
            px = px[:, ::-1]
        if do_v:
            px = px[::-1, :]
        return Frame(np.ascontiguousarray(px))

    gt = transform(win.ground_truth) if win.ground_truth is not None else None
    return replace(win, frames=tuple(transform(f) for f in win.frames), ground_truth=gt)


def luminance(frame) -> np.ndarray:
    """ITU-R BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B."""
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    if px.ndim == 2:
        return px.astype(np.float64)
    return px.astype(np.float64) @ LUMA_WEIGHTS


# ---------------------------------------------------------------------------
# Tensor bridging (torch lives behind this seam)


def frame_to_tensor(frame, dtype=None):
    import torch

    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    t = torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1)))
    return t.to(dtype) if dtype is not None else t.float()


def window_to_tensor(win: FrameWindow, dtype=None):
    import torch

    return torch.stack([frame_to_tensor(f, dtype) for f in win.frames])


def tensor_to_frame(t) -> Frame:
    arr = t.detach().cpu().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    arr = np.clip(arr.transpose(1, 2, 0), 0.0, 1.0)
    return Frame(np.ascontiguousarray(arr.astype(np.float32)))
