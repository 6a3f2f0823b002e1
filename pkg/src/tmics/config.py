"""Experiment configuration.

Dataclass groups mirror the subsystems (model, data, rain bank, flow,
search, train, synth, run).  Configurations round-trip through a plain-text
file of dotted keys, one ``group.field = value`` per line; unknown keys are
rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

# Shipped genotype presets (ordered operation identifiers, one cell).
LIGHT_CELL = "res3,attn_spatial,dil3,attn_channel"
HEAVY_CELL = "res5,attn_spatial,attn_channel,res3"

MACRO_CHOICES = ("mixed", "ofm", "tgm")


def _doc(text):
    return field(metadata={"doc": text})


@dataclass
class ModelConfig:
    channels: int = 32            # feature width of the restoration branches
    cells: int = 4                # cascaded cells per branch
    align_channels: int = 16      # hidden width of the alignment encoder/fusion convs
    aas_channels: int = 16        # hidden width of the fusion-attention convs
    gars_channels: int = 8        # hidden width of the coarse rain estimator
    use_gars: bool = True         # feed the dominant branch synthetically hardened frames
    macro: str = "mixed"          # alignment scheme: mixed (searchable), ofm, or tgm
    cell_spec: str = ""           # comma-separated op ids; empty = relaxed (search) mode


@dataclass
class DataConfig:
    frames: int = 5               # temporal window size, odd, in {3,5,7}
    crop: int = 240               # square training crop, px
    flips: bool = True            # allow horizontal/vertical flip augmentation


@dataclass
class RainConfig:
    """Kernel bank of the auxiliary rain-streak generator."""

    kernels: int = 6              # total filters, split across the two groups
    small_size: int = 9           # odd kernel size, short/blurred streak group
    large_size: int = 15          # odd kernel size, long streak group
    small_length: float = 4.0     # streak length, px, short group
    large_length: float = 12.0    # streak length, px, long group
    small_sigma: float = 1.0      # cross-streak Gaussian width, short (blurred) group
    large_sigma: float = 0.4      # cross-streak Gaussian width, long group
    angle_span: float = 120.0     # kernels cover angles in [-span/2, +span/2] degrees


@dataclass
class FlowConfig:
    levels: int = 3               # pyramid levels of the built-in flow estimator
    iterations: int = 2           # refinement iterations per level
    window: int = 7               # odd least-squares window, px
    ridge: float = 1.0e-3         # regulariser; textureless regions resolve to zero flow


@dataclass
class SearchConfig:
    epochs: int = 80
    batch: int = 4
    warm_start_epochs: int = 30   # weight-only epochs before architecture steps begin
    arch_lr: float = 1.0e-4       # SGD step size on architecture logits
    lr0: float = 3.0e-4           # initial weight learning rate (cosine-annealed)
    lr_min: float = 1.0e-6        # final weight learning rate
    rho: float = 0.75             # L1 weight in the task loss
    eta: float = 0.01             # entropy-regulariser weight in the architecture loss
    val_fraction: float = 0.25    # fraction of sequences held out for architecture steps
    include_companion: bool = False  # add the companion branch's loss to the arch objective
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 160
    batch: int = 4
    lr0: float = 3.0e-4           # initial learning rate (cosine-annealed, Adam)
    lr_min: float = 1.0e-6
    rho: float = 0.75
    max_steps: int = 0            # stop after this many optimiser steps; 0 = run all epochs
    aas_epochs: int = 50          # fusion-attention fine-tune epochs
    aas_lr: float = 1.0e-6
    aas_max_steps: int = 0
    seed: int = 0


@dataclass
class SynthConfig:
    """Synthetic rainy-dataset generation (the `synth` CLI subcommand)."""

    sequences: int = 4
    frames: int = 9
    size: int = 64                # square frame size, px
    count_lo: int = 16            # streaks per frame, inclusive range
    count_hi: int = 28
    angle_lo: float = 70.0        # streak angle, degrees from the horizontal axis
    angle_hi: float = 110.0
    length_lo: float = 6.0        # streak length, px
    length_hi: float = 14.0
    opacity_lo: float = 0.15
    opacity_hi: float = 0.45
    width: float = 0.7            # cross-streak Gaussian sigma, px
    independent: bool = True      # fresh streaks per frame vs. drifting shared field


@dataclass
class RunConfig:
    deterministic: bool = True    # deterministic math mode (single thread, pinned kernels)
    log_file: str = ""            # optional path for per-step log lines


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rain: RainConfig = field(default_factory=RainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunConfig = field(default_factory=RunConfig)


_GROUPS = ("model", "data", "rain", "flow", "search", "train", "synth", "run")


def to_text(cfg: ExperimentConfig) -> str:
    """Serialise a configuration as sorted ``group.field = value`` lines."""
    lines = []
    for group in _GROUPS:
        sub = getattr(cfg, group)
        for f in fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{group}.{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _coerce(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def apply_text(cfg: ExperimentConfig, text: str) -> ExperimentConfig:
    """Apply dotted-key assignments from `text` onto `cfg` in place."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'group.key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        group, name = key.split(".")
        if group not in _GROUPS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        sub = getattr(cfg, group)
        if not any(f.name == name for f in fields(sub)):
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        setattr(sub, name, _coerce(raw, type(getattr(sub, name))))
    return cfg


def parse_text(text: str) -> ExperimentConfig:
    return apply_text(ExperimentConfig(), text)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode("utf-8")).hexdigest()[:16]


def validate(cfg: ExperimentConfig) -> None:
    if cfg.data.frames not in (3, 5, 7):
        raise ValueError(f"data.frames must be one of 3, 5, 7; got {cfg.data.frames}")
    if cfg.model.macro not in MACRO_CHOICES:
        raise ValueError(f"model.macro must be one of {MACRO_CHOICES}; got {cfg.model.macro!r}")
    if cfg.model.channels < 8:
        raise ValueError("model.channels must be at least 8")
    for name in ("lr0", "lr_min", "arch_lr"):
        if getattr(cfg.search, name, 1.0) <= 0:
            raise ValueError(f"search.{name} must be positive")
    if cfg.train.lr0 <= 0 or cfg.train.lr_min <= 0:
        raise ValueError("train learning rates must be positive")
    if cfg.search.rho < 0 or cfg.search.eta < 0 or cfg.train.rho < 0:
        raise ValueError("rho and eta must be nonnegative")
    if cfg.rain.small_size % 2 == 0 or cfg.rain.large_size % 2 == 0:
        raise ValueError("rain kernel sizes must be odd")
    if not 0.0 <= cfg.synth.opacity_lo <= cfg.synth.opacity_hi <= 1.0:
        raise ValueError("synth opacity range must lie within [0, 1]")


def toy_config() -> ExperimentConfig:
    """Desk-scale preset: small model, small crops, short schedules."""
    cfg = ExperimentConfig()
    cfg.model.channels = 8
    cfg.model.cells = 1
    cfg.model.align_channels = 8
    cfg.model.aas_channels = 8
    cfg.model.gars_channels = 4
    cfg.model.macro = "ofm"
    cfg.model.cell_spec = LIGHT_CELL
    cfg.data.frames = 3
    cfg.data.crop = 64
    cfg.rain.kernels = 4
    cfg.rain.small_size = 5
    cfg.rain.large_size = 9
    cfg.rain.large_length = 7.0
    cfg.flow.levels = 2
    cfg.flow.window = 5
    cfg.search.epochs = 20
    cfg.search.batch = 2
    cfg.search.warm_start_epochs = 5
    cfg.search.arch_lr = 3.0e-2
    cfg.search.lr0 = 1.0e-3
    cfg.train.epochs = 20
    cfg.train.batch = 2
    cfg.train.lr0 = 2.0e-3
    cfg.train.max_steps = 300
    cfg.train.aas_epochs = 4
    cfg.train.aas_lr = 1.0e-3
    cfg.train.aas_max_steps = 60
    return cfg


def light_config() -> ExperimentConfig:
    """Full-scale preset for light rain: derived cell + optical-flow alignment."""
    cfg = ExperimentConfig()
    cfg.model.cell_spec = LIGHT_CELL
    cfg.model.macro = "ofm"
    return cfg


def heavy_config() -> ExperimentConfig:
    """Full-scale preset for heavy rain: derived cell + temporal-grouping alignment."""
    cfg = ExperimentConfig()
    cfg.model.cell_spec = HEAVY_CELL
    cfg.model.macro = "tgm"
    return cfg


PRESETS = {"toy": toy_config, "light": light_config, "heavy": heavy_config}
