import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tmics import losses
from tmics.data import Frame


def constant_frame(value, h=20, w=20):
    return Frame(np.full((h, w, 3), value, dtype=np.float32))


def constant_ssim_closed_form(a, b, cfg=losses.DEFAULT_LOSS):
    """For constant images all variance terms vanish; only means remain."""
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    return (2 * a * b + c1) / (a * a + b * b + c1)


class TestSsim:
    def test_self_similarity(self):
        x = torch.rand(3, 24, 24, dtype=torch.float64)
        assert abs(losses.ssim(x, x).item() - 1.0) < 1e-9

    def test_symmetry(self):
        x = torch.rand(3, 24, 24, dtype=torch.float64)
        y = torch.rand(3, 24, 24, dtype=torch.float64)
        assert abs(losses.ssim(x, y).item() - losses.ssim(y, x).item()) < 1e-9

    def test_constant_frames_closed_form(self):
        got = losses.ssim(constant_frame(0.5), constant_frame(0.25)).item()
        assert abs(got - constant_ssim_closed_form(0.5, 0.25)) < 1e-6

    def test_bounded_above_with_equality_iff_equal(self):
        x = torch.rand(3, 24, 24, dtype=torch.float64)
        for scale in (1e-3, 1e-2, 1e-1):
            y = (x + scale * torch.randn_like(x)).clamp(0, 1)
            value = losses.ssim(x, y).item()
            assert value < 1.0
        assert losses.ssim(x, x).item() == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            losses.ssim(torch.rand(3, 24, 24), torch.rand(3, 20, 20))

    def test_too_small_frame(self):
        with pytest.raises(ValueError):
            losses.ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))


class TestTaskLoss:
    def test_perfect_reconstruction(self):
        x = torch.rand(3, 24, 24, dtype=torch.float64)
        assert losses.task_loss(x, x).item() == pytest.approx(-1.0, abs=1e-12)

    def test_rho_zero_isolates_ssim(self):
        cfg = losses.LossConfig(rho=0.0)
        x = torch.rand(3, 24, 24, dtype=torch.float64)
        y = torch.rand(3, 24, 24, dtype=torch.float64)
        assert losses.task_loss(x, y, cfg).item() == pytest.approx(-losses.ssim(x, y, cfg).item(), abs=1e-12)

    def test_constant_frames_composed_closed_form(self):
        got = losses.task_loss(constant_frame(0.5), constant_frame(0.25)).item()
        expected = -constant_ssim_closed_form(0.5, 0.25) + 0.75 * 0.25
        assert abs(got - expected) < 1e-6

    def test_monotone_along_interpolation(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            x = torch.from_numpy(rng.uniform(0, 1, (3, 24, 24)))
            y = torch.from_numpy(rng.uniform(0, 1, (3, 24, 24)))
            values = []
            for t in np.linspace(0.0, 1.0, 10):
                xt = y + (1.0 - t) * (x - y)
                values.append(losses.task_loss(xt, y).item())
            assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = torch.from_numpy(rng.uniform(0.1, 0.9, (3, 16, 16))).requires_grad_(True)
        y = torch.from_numpy(rng.uniform(0.1, 0.9, (3, 16, 16)))
        losses.task_loss(x, y).backward()
        flat = x.detach().reshape(-1)
        h = 1e-6
        for idx in rng.integers(0, flat.numel(), 10):
            xp = flat.clone()
            xp[idx] += h
            xm = flat.clone()
            xm[idx] -= h
            fd = (losses.task_loss(xp.reshape(3, 16, 16), y)
                  - losses.task_loss(xm.reshape(3, 16, 16), y)).item() / (2 * h)
            an = x.grad.reshape(-1)[idx].item()
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-9) < 1e-4


class TestEntropyReg:
    def test_saturated_is_zero(self):
        logits = torch.zeros(4, 8)
        logits[:, 3] = 60.0
        assert losses.entropy_reg(logits).item() < 1e-9

    def test_uniform_closed_form(self):
        value = losses.entropy_reg(torch.zeros(4, 8, dtype=torch.float64)).item()
        assert abs(value - 4.0 * math.log(8.0)) < 1e-9

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_bounds(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(4, 8, generator=g, dtype=torch.float64) * 10
        value = losses.entropy_reg(logits).item()
        assert -1e-12 <= value <= 4.0 * math.log(8.0) + 1e-12

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(4, 8, generator=g, dtype=torch.float64)
        perm = torch.randperm(8, generator=g)
        a = losses.entropy_reg(logits).item()
        b = losses.entropy_reg(logits[:, perm]).item()
        assert abs(a - b) < 1e-9


class TestArchLoss:
    def test_eta_zero(self):
        cfg = losses.LossConfig(eta=0.0)
        logits = torch.randn(4, 8)
        assert losses.arch_loss(0.37, logits, cfg).item() == pytest.approx(0.37)

    def test_uniform_alpha_offset(self):
        value = losses.arch_loss(0.5, torch.zeros(4, 8, dtype=torch.float64)).item()
        assert abs(value - (0.5 + 0.01 * 4.0 * math.log(8.0))) < 1e-9

    def test_logit_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(4, 8, generator=g, dtype=torch.float64, requires_grad=True)
        losses.arch_loss(0.0, logits).backward()
        h = 1e-6
        rng = np.random.default_rng(4)
        flat = logits.detach().reshape(-1)
        for idx in rng.integers(0, flat.numel(), 10):
            lp = flat.clone()
            lp[idx] += h
            lm = flat.clone()
            lm[idx] -= h
            fd = (losses.arch_loss(0.0, lp.reshape(4, 8))
                  - losses.arch_loss(0.0, lm.reshape(4, 8))).item() / (2 * h)
            an = logits.grad.reshape(-1)[idx].item()
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-9) < 1e-4


class TestPsnr:
    def test_identical_is_infinite(self):
        x = constant_frame(0.3)
        assert math.isinf(losses.psnr(x, x))

    def test_uniform_offset_closed_form(self):
        x = constant_frame(0.2)
        y = constant_frame(0.2 + 16.0 / 255.0)
        expected = 20.0 * math.log10(255.0 / 16.0)
        assert losses.psnr(x, y) == pytest.approx(expected, abs=1e-3)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        x = Frame(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32))
        y = Frame(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32))
        assert losses.psnr(x, y) == pytest.approx(losses.psnr(y, x), abs=1e-12)
