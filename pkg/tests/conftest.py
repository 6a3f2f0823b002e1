import numpy as np
import pytest
import torch

from tmics import config, data


def make_toy_pairs(n_sequences=4, n_frames=9, size=64, seed=100):
    """In-memory paired toy dataset: procedural clean content plus seeded rain."""
    cfg = config.toy_config()
    pairs = []
    for i in range(n_sequences):
        clean = data.generate_clean_sequence(f"s{i:02d}", n_frames, size, seed + i)
        rainy, _ = data.synthesize_rainy(clean, cfg.synth, seed + 400 + i)
        pairs.append((rainy, clean))
    return pairs


def random_frame(rng, h=16, w=16, lo=0.0, hi=1.0):
    return data.Frame(rng.uniform(lo, hi, size=(h, w, 3)).astype(np.float32))


def tiny_model_config(cell_spec="", macro="mixed", frames=3):
    """Smallest legal model for unit tests."""
    cfg = config.toy_config()
    cfg.model.cell_spec = cell_spec
    cfg.model.macro = macro
    cfg.data.frames = frames
    cfg.data.crop = 16
    cfg.rain.kernels = 2
    cfg.rain.small_size = 3
    cfg.rain.large_size = 5
    cfg.rain.large_length = 4.0
    cfg.flow.levels = 1
    cfg.flow.iterations = 1
    return cfg


@pytest.fixture(scope="session")
def toy_pairs():
    return make_toy_pairs()


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)
