"""Alternating search, two-stage derived training, and fusion fine-tuning.

The search phase alternates epochs of weight updates (each branch driven by
its own loss through a single shared backward pass) with first-order
gradient steps on the architecture logits over held-out batches, after a
weight-only warm start.  Derived training optimises both discrete branches;
a final stage unfreezes only the fusion attention.  All stages log one
machine-parsable line per step and checkpoint at epoch boundaries.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Optional

import torch

from . import ConfigurationError
from .checkpoint import (
    generator_state_bytes,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    rng_state_bytes,
    save_checkpoint,
    set_generator_state_bytes,
    set_rng_state_bytes,
)
from .config import ExperimentConfig, config_hash, parse_text, to_text, validate
from .data import augment, frame_to_tensor, window, window_to_tensor
from .losses import LossConfig, arch_loss, entropy_reg, task_loss
from .networks import TripleModel, build_model
from .searchspace import CellSpec, derive_cell


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from `lr0` at step 0 down to `lr_min` at `total_steps`."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def derive_macro(macro_logits) -> str:
    """Discrete alignment choice from the macro logits (ties favour flow)."""
    logits = torch.as_tensor(macro_logits).detach()
    return "ofm" if int(logits.argmax()) == 0 else "tgm"


class TrainLogger:
    """One machine-parsable line per optimiser step."""

    FIELDS = ("step", "phase", "L_D", "L_C", "L_arc", "lr", "entropy_alpha")

    def __init__(self, path=None, echo: bool = False):
        self.path = Path(path) if path else None
        self.echo = echo
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return "-"
        if isinstance(value, str):
            return value
        return f"{value:.9g}"

    def log(self, step, phase, l_d=None, l_c=None, l_arc=None, lr=None, entropy=None):
        record = {
            "step": step, "phase": phase, "L_D": l_d, "L_C": l_c,
            "L_arc": l_arc, "lr": lr, "entropy_alpha": entropy,
        }
        self.records.append(record)
        line = " ".join(f"{k}={self._fmt(record[k])}" for k in self.FIELDS)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        if self.echo:
            print(line)
        return line


def apply_determinism(cfg: ExperimentConfig) -> None:
    if cfg.run.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def split_pairs(pairs, val_fraction: float):
    """Hold out trailing sequences for the architecture objective."""
    if len(pairs) < 2:
        raise ConfigurationError("need at least two sequences to split train/validation")
    n_val = min(len(pairs) - 1, max(1, round(len(pairs) * val_fraction)))
    return pairs[:-n_val], pairs[-n_val:]


class WindowBatcher:
    """Deterministic sampler of augmented frame windows.

    Draws an epoch permutation and per-sample augmentation seeds from one
    torch generator, so saving that generator's state at an epoch boundary
    makes resumed runs reproduce the uninterrupted sample stream.
    """

    def __init__(self, pairs, frames: int, crop: int, flips: bool, batch: int,
                 generator: torch.Generator):
        if not pairs:
            raise ConfigurationError("empty dataset split")
        self.pairs = pairs
        self.frames = frames
        self.flips = (flips, flips)
        self.batch = batch
        self.generator = generator
        self.samples = [
            (si, t) for si, (rainy, _) in enumerate(pairs) for t in range(len(rainy))
        ]
        h = pairs[0][0].frames[0].height
        w = pairs[0][0].frames[0].width
        if crop > min(h, w):
            raise ConfigurationError(f"crop {crop} exceeds frame size {h}x{w}")
        self.crop = crop

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.samples) / self.batch)

    def epoch_batches(self):
        order = torch.randperm(len(self.samples), generator=self.generator).tolist()
        for start in range(0, len(order), self.batch):
            chunk = order[start:start + self.batch]
            windows, gts = [], []
            for idx in chunk:
                si, t = self.samples[idx]
                rainy, clean = self.pairs[si]
                win = window(rainy, t, self.frames)
                win = dc_replace(win, ground_truth=clean.frames[t])
                seed = int(torch.randint(0, 2**31 - 1, (1,), generator=self.generator).item())
                win = augment(win, self.crop, self.flips, seed)
                windows.append(window_to_tensor(win))
                gts.append(frame_to_tensor(win.ground_truth))
            yield torch.stack(windows), torch.stack(gts)


@dataclass
class RunResult:
    model: TripleModel
    cfg: ExperimentConfig
    records: list
    checkpoint: Optional[Path]


@dataclass
class SearchResult(RunResult):
    spec: CellSpec = None
    macro: str = ""


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _save(out_dir, model, optimizers, cfg, phase, epoch, gstep, sampler, extra=None):
    if out_dir is None:
        return None
    return save_checkpoint(
        Path(out_dir),
        model=model,
        optimizers=optimizers,
        config_text=to_text(cfg),
        phase=phase,
        epoch=epoch,
        global_step=gstep,
        rng_states={"torch": rng_state_bytes(), "sampler": generator_state_bytes(sampler)},
        extra_meta={"config_hash": config_hash(cfg), **(extra or {})},
    )


def _resume(path, model, optimizers, sampler):
    ckpt = load_checkpoint(path)
    restore_model(ckpt, model)
    for name, opt in optimizers.items():
        restore_optimizer(ckpt, name, opt)
    if "torch" in ckpt.rng:
        set_rng_state_bytes(ckpt.rng["torch"])
    if "sampler" in ckpt.rng:
        set_generator_state_bytes(sampler, ckpt.rng["sampler"])
    return ckpt.epoch, ckpt.global_step


def run_search(cfg: ExperimentConfig, train_pairs, val_pairs, out_dir=None, *,
               flow_estimator=None, logger=None) -> SearchResult:
    """Alternating weight/architecture optimisation in relaxed mode."""
    if not train_pairs or not val_pairs:
        raise ConfigurationError("search needs non-empty train and validation splits")
    cfg = copy.deepcopy(cfg)
    cfg.model.cell_spec = ""
    cfg.model.macro = "mixed"
    validate(cfg)
    apply_determinism(cfg)
    scfg = cfg.search
    lcfg = LossConfig(rho=scfg.rho, eta=scfg.eta)
    logger = logger or TrainLogger(Path(out_dir) / "steps.log" if out_dir else None)

    torch.manual_seed(scfg.seed)
    model = build_model(cfg, flow_estimator)
    opt_w = torch.optim.Adam(model.weight_parameters(), lr=scfg.lr0)
    opt_arch = torch.optim.SGD(model.arch_parameters(), lr=scfg.arch_lr)
    optimizers = {"weights": opt_w, "arch": opt_arch}
    sampler = torch.Generator()
    sampler.manual_seed(scfg.seed + 1)
    train_batches = WindowBatcher(train_pairs, cfg.data.frames, cfg.data.crop,
                                  cfg.data.flips, scfg.batch, sampler)
    val_batches = WindowBatcher(val_pairs, cfg.data.frames, cfg.data.crop,
                                cfg.data.flips, scfg.batch, sampler)
    total_w = max(scfg.epochs * train_batches.steps_per_epoch - 1, 1)

    gstep = 0
    w_step = 0
    ckpt = None
    for epoch in range(scfg.epochs):
        for windows, gts in train_batches.epoch_batches():
            lr = cosine_lr(min(w_step, total_w), total_w, scfg.lr0, scfg.lr_min)
            _set_lr(opt_w, lr)
            out = model(windows, use_aas=False)
            l_d = task_loss(out.dominant, gts, lcfg)
            l_c = task_loss(out.companion, gts, lcfg)
            opt_w.zero_grad()
            (l_d + l_c).backward()
            opt_w.step()
            gstep += 1
            w_step += 1
            logger.log(gstep, "weights", l_d.item(), l_c.item(), None, lr,
                       float(entropy_reg(model.micro_logits.detach())))
        if epoch >= scfg.warm_start_epochs:
            for windows, gts in val_batches.epoch_batches():
                out = model(windows, use_aas=False)
                task_val = task_loss(out.dominant, gts, lcfg)
                if scfg.include_companion:
                    task_val = task_val + task_loss(out.companion, gts, lcfg)
                l_arc = arch_loss(task_val, model.micro_logits, lcfg)
                opt_arch.zero_grad()
                l_arc.backward()
                opt_arch.step()
                gstep += 1
                logger.log(gstep, "arch", None, None, l_arc.item(), scfg.arch_lr,
                           float(entropy_reg(model.micro_logits.detach())))
        ckpt = _save(out_dir, model, optimizers, cfg, "search", epoch + 1, gstep, sampler)

    if ckpt is None:
        ckpt = _save(out_dir, model, optimizers, cfg, "search", 0, gstep, sampler)
    return SearchResult(model=model, cfg=cfg, records=logger.records, checkpoint=ckpt,
                        spec=derive_cell(model.micro_logits),
                        macro=derive_macro(model.macro_logits))


def run_train(cfg: ExperimentConfig, pairs, spec: CellSpec, macro: str, out_dir=None, *,
              flow_estimator=None, logger=None, resume_from=None,
              stop_after_epochs=None) -> RunResult:
    """Stage-one training of both derived branches against ground truth.

    `stop_after_epochs` interrupts the run after that many additional epochs
    (checkpointing as usual) without shortening the learning-rate schedule,
    so a later `resume_from` continues exactly where an uninterrupted run
    would have been.
    """
    if macro not in ("ofm", "tgm"):
        raise ConfigurationError(f"derived training needs a discrete alignment choice; got {macro!r}")
    cfg = copy.deepcopy(cfg)
    cfg.model.cell_spec = spec.to_line()
    cfg.model.macro = macro
    validate(cfg)
    apply_determinism(cfg)
    tcfg = cfg.train
    lcfg = LossConfig(rho=tcfg.rho)
    logger = logger or TrainLogger(Path(out_dir) / "steps.log" if out_dir else None)

    torch.manual_seed(tcfg.seed)
    model = build_model(cfg, flow_estimator)
    opt_w = torch.optim.Adam(model.weight_parameters(), lr=tcfg.lr0)
    optimizers = {"weights": opt_w}
    sampler = torch.Generator()
    sampler.manual_seed(tcfg.seed + 1)
    batches = WindowBatcher(pairs, cfg.data.frames, cfg.data.crop, cfg.data.flips,
                            tcfg.batch, sampler)
    planned = tcfg.epochs * batches.steps_per_epoch
    if tcfg.max_steps > 0:
        planned = min(planned, tcfg.max_steps)
    total_w = max(planned - 1, 1)

    start_epoch, gstep = 0, 0
    if resume_from is not None:
        start_epoch, gstep = _resume(resume_from, model, optimizers, sampler)

    completed = start_epoch
    done = gstep >= planned
    ckpt = None
    for epoch in range(start_epoch, tcfg.epochs):
        if done:
            break
        for windows, gts in batches.epoch_batches():
            lr = cosine_lr(min(gstep, total_w), total_w, tcfg.lr0, tcfg.lr_min)
            _set_lr(opt_w, lr)
            out = model(windows, use_aas=False)
            l_d = task_loss(out.dominant, gts, lcfg)
            l_c = task_loss(out.companion, gts, lcfg)
            opt_w.zero_grad()
            (l_d + l_c).backward()
            opt_w.step()
            gstep += 1
            logger.log(gstep, "train", l_d.item(), l_c.item(), None, lr, None)
            if gstep >= planned:
                done = True
                break
        completed = epoch + 1
        ckpt = _save(out_dir, model, optimizers, cfg, "train", completed, gstep, sampler)
        if stop_after_epochs is not None and completed - start_epoch >= stop_after_epochs:
            break

    if ckpt is None:
        ckpt = _save(out_dir, model, optimizers, cfg, "train", completed, gstep, sampler)
    return RunResult(model=model, cfg=cfg, records=logger.records, checkpoint=ckpt)


def run_finetune_aas(cfg: ExperimentConfig, pairs, ckpt_path, out_dir=None, *,
                     flow_estimator=None, logger=None) -> RunResult:
    """Stage two: freeze everything except fusion attention, supervise the fused output."""
    model, model_cfg, _ = load_model(ckpt_path, flow_estimator)
    cfg = copy.deepcopy(cfg)
    cfg.model = model_cfg.model
    validate(cfg)
    apply_determinism(cfg)
    tcfg = cfg.train
    lcfg = LossConfig(rho=tcfg.rho)
    logger = logger or TrainLogger(Path(out_dir) / "steps.log" if out_dir else None)

    torch.manual_seed(tcfg.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.aas_parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.aas_parameters(), lr=tcfg.aas_lr)
    sampler = torch.Generator()
    sampler.manual_seed(tcfg.seed + 2)
    batches = WindowBatcher(pairs, cfg.data.frames, cfg.data.crop, cfg.data.flips,
                            tcfg.batch, sampler)
    planned = tcfg.aas_epochs * batches.steps_per_epoch
    if tcfg.aas_max_steps > 0:
        planned = min(planned, tcfg.aas_max_steps)

    gstep = 0
    done = planned == 0
    for _ in range(tcfg.aas_epochs):
        if done:
            break
        for windows, gts in batches.epoch_batches():
            out = model(windows, use_aas=True)
            loss = task_loss(out.fused, gts, lcfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            gstep += 1
            logger.log(gstep, "aas", loss.item(), None, None, tcfg.aas_lr, None)
            if gstep >= planned:
                done = True
                break

    ckpt = _save(out_dir, model, {"aas": opt}, cfg, "finetune", tcfg.aas_epochs, gstep, sampler)
    return RunResult(model=model, cfg=cfg, records=logger.records, checkpoint=ckpt)


def fused_training_loss(model: TripleModel, pairs, cfg: ExperimentConfig, *,
                        use_aas: bool = True, lcfg: Optional[LossConfig] = None) -> float:
    """Mean fused-output loss over every window, without augmentation."""
    lcfg = lcfg or LossConfig(rho=cfg.train.rho)
    total, count = 0.0, 0
    with torch.no_grad():
        for rainy, clean in pairs:
            for t in range(len(rainy)):
                win = window(rainy, t, cfg.data.frames)
                windows = window_to_tensor(win)[None]
                gt = frame_to_tensor(clean.frames[t])[None]
                out = model(windows, use_aas=use_aas)
                total += float(task_loss(out.fused, gt, lcfg))
                count += 1
    return total / max(count, 1)


def load_model(path, flow_estimator=None):
    """Rebuild a model from a checkpoint's own configuration and restore it."""
    ckpt = load_checkpoint(path)
    cfg = parse_text(ckpt.config_text)
    model = build_model(cfg, flow_estimator)
    restore_model(ckpt, model)
    return model, cfg, ckpt
