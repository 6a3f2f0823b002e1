"""Versioned on-disk parameter store.

A checkpoint is a directory holding ``manifest.txt`` (format version, config
hash, counters, RNG states, and an index naming every array with dtype and
shape), ``config.txt`` (the full experiment configuration), and one
little-endian row-major binary per array under ``arrays/``.  Writes go to a
temporary directory that is atomically renamed into place.
"""

from __future__ import annotations

import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ConfigurationError, IntegrityError

FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class CheckpointData:
    meta: dict
    config_text: str
    arrays: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)

    @property
    def phase(self) -> str:
        return self.meta.get("phase", "")

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def global_step(self) -> int:
        return int(self.meta.get("global_step", 0))


def _tensor_to_array(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    if arr.dtype != np.float32 and arr.dtype != np.float64:
        # Counters are widened to float64 (exact for small integers).
        arr = arr.astype(np.float64)
    # np.array (not ascontiguousarray) so 0-dim scalars keep their shape.
    return np.array(arr, order="C", copy=True)


def _collect_arrays(model, optimizers) -> dict:
    arrays = {}
    for key, tensor in model.state_dict().items():
        arrays[f"model.{key}"] = _tensor_to_array(tensor)
    for name, opt in (optimizers or {}).items():
        state = opt.state_dict().get("state", {})
        for pid, slots in state.items():
            for slot, value in slots.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"opt.{name}.{pid}.{slot}"] = _tensor_to_array(value)
                else:
                    arrays[f"opt.{name}.{pid}.{slot}"] = np.asarray(float(value), dtype=np.float64)
    return arrays


def save_checkpoint(path, *, model, optimizers=None, config_text: str = "",
                    phase: str = "", epoch: int = 0, global_step: int = 0,
                    rng_states=None, extra_meta=None) -> Path:
    """Write a checkpoint directory; returns the final path."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp-write")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "arrays").mkdir(parents=True)

    arrays = _collect_arrays(model, optimizers)
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"phase = {phase}",
        f"epoch = {epoch}",
        f"global_step = {global_step}",
    ]
    for key, value in (extra_meta or {}).items():
        lines.append(f"{key} = {value}")
    for name, blob in (rng_states or {}).items():
        lines.append(f"rng.{name} = {blob.hex()}")
    for name in sorted(arrays):
        arr = arrays[name]
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"array {name} {arr.dtype.name} {shape}")
        with open(tmp / "arrays" / f"{name}.bin", "wb") as fh:
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    (tmp / "manifest.txt").write_text("\n".join(lines) + "\n")
    (tmp / "config.txt").write_text(config_text)

    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> CheckpointData:
    """Read and validate a checkpoint directory."""
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    meta, rng, index = {}, {}, []
    for raw in manifest.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("array "):
            try:
                _, name, dtype, shape = line.split(" ")
            except ValueError:
                raise IntegrityError(f"malformed manifest line: {raw!r}") from None
            index.append((name, dtype, shape))
        elif "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith("rng."):
                rng[key[4:]] = bytes.fromhex(value)
            else:
                meta[key] = value
        else:
            raise IntegrityError(f"malformed manifest line: {raw!r}")
    version = meta.get("format_version")
    if version != str(FORMAT_VERSION):
        raise IntegrityError(
            f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})"
        )
    config_file = path / "config.txt"
    config_text = config_file.read_text() if config_file.exists() else ""

    arrays = {}
    for name, dtype, shape_text in index:
        if dtype not in _DTYPES:
            raise IntegrityError(f"array {name}: unsupported dtype {dtype!r}")
        shape = () if shape_text == "scalar" else tuple(int(d) for d in shape_text.split(","))
        blob_path = path / "arrays" / f"{name}.bin"
        if not blob_path.is_file():
            raise IntegrityError(f"array {name}: missing data file")
        blob = blob_path.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
        if len(blob) != expected:
            raise IntegrityError(
                f"array {name}: {len(blob)} bytes on disk but manifest says {expected}"
            )
        arrays[name] = np.frombuffer(blob, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<")).reshape(shape).copy()
    return CheckpointData(meta=meta, config_text=config_text, arrays=arrays, rng=rng)


def restore_model(ckpt: CheckpointData, model) -> None:
    """Load model arrays from a checkpoint; shape mismatches are configuration errors."""
    state = {}
    for key, tensor in model.state_dict().items():
        name = f"model.{key}"
        if name not in ckpt.arrays:
            raise ConfigurationError(f"checkpoint is missing parameter {key!r}")
        arr = ckpt.arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"checkpoint parameter {key!r} has shape {arr.shape}, model expects {tuple(tensor.shape)}"
            )
        state[key] = torch.from_numpy(arr).to(tensor.dtype)
    model.load_state_dict(state)


def restore_optimizer(ckpt: CheckpointData, name: str, optimizer) -> None:
    """Restore per-parameter optimizer slots saved under ``opt.<name>.*``."""
    prefix = f"opt.{name}."
    slots_by_pid: dict = {}
    for key, arr in ckpt.arrays.items():
        if not key.startswith(prefix):
            continue
        pid_text, slot = key[len(prefix):].split(".", 1)
        slots_by_pid.setdefault(int(pid_text), {})[slot] = arr
    if not slots_by_pid:
        return
    sd = optimizer.state_dict()
    params = [p for group in sd["param_groups"] for p in group["params"]]
    state = {}
    for pid, slots in slots_by_pid.items():
        if pid not in params:
            raise ConfigurationError(f"optimizer {name!r}: unknown parameter index {pid}")
        state[pid] = {
            slot: torch.from_numpy(arr).to(torch.float32 if arr.dtype == np.float32 else torch.float64)
            for slot, arr in slots.items()
        }
    optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def rng_state_bytes() -> bytes:
    return torch.get_rng_state().numpy().tobytes()


def set_rng_state_bytes(blob: bytes) -> None:
    torch.set_rng_state(torch.from_numpy(np.frombuffer(blob, dtype=np.uint8).copy()))


def generator_state_bytes(gen: torch.Generator) -> bytes:
    return gen.get_state().numpy().tobytes()


def set_generator_state_bytes(gen: torch.Generator, blob: bytes) -> None:
    gen.set_state(torch.from_numpy(np.frombuffer(blob, dtype=np.uint8).copy()))
