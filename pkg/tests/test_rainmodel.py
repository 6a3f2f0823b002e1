import numpy as np
import pytest
import torch

from tmics import config, data, rainmodel
from tmics.searchspace import ResidualBlock


def conv_reflect_oracle(img, kernel):
    """Nested-loop correlation with reflect padding (independent of torch)."""
    k = kernel.shape[0]
    pad = k // 2
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            out[y, x] = float((padded[y:y + k, x:x + k] * kernel).sum())
    return out


def delta_bank(weight=1.0):
    bank = rainmodel.KernelBank([np.array([[1.0]])], [0])
    with torch.no_grad():
        bank.weights.fill_(weight)
    return bank


def box_bank(sizes=(3, 5), weights=(0.5, 0.5)):
    kernels = [np.full((s, s), 1.0 / (s * s)) for s in sizes]
    bank = rainmodel.KernelBank(kernels, [0, 1])
    with torch.no_grad():
        bank.weights.copy_(torch.tensor(weights))
    return bank


class TestLineKernel:
    def test_size_one_is_delta(self):
        np.testing.assert_array_equal(rainmodel.line_kernel(1, 0.0, 1.0, 0.5), [[1.0]])

    def test_unit_sum(self):
        for angle in (-60.0, 0.0, 30.0, 90.0):
            for size, length in ((5, 3.0), (9, 9.0), (15, 12.0)):
                k = rainmodel.line_kernel(size, angle, length, 0.6)
                assert abs(k.sum() - 1.0) < 1e-12
                assert k.min() >= 0.0

    def test_horizontal_mass_on_middle_row(self):
        k = rainmodel.line_kernel(9, 0.0, 9.0, 0.4)
        assert k[4].sum() > 0.9

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            rainmodel.line_kernel(8, 0.0, 5.0, 0.5)


class TestKernelBank:
    def test_defaults_normalised(self):
        bank = rainmodel.make_kernel_bank(config.RainConfig())
        assert len(bank) == 6
        assert set(bank.group_ids) == {0, 1}
        for i in range(len(bank)):
            assert abs(float(bank.kernel(i).sum()) - 1.0) < 1e-6
        np.testing.assert_allclose(bank.weights.detach().numpy(), 1.0 / 6.0, atol=1e-7)

    def test_single_delta(self):
        cfg = config.RainConfig(kernels=1, small_size=1, small_length=1.0)
        bank = rainmodel.make_kernel_bank(cfg)
        assert len(bank) == 1
        np.testing.assert_array_equal(bank.kernel(0).numpy(), [[1.0]])

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            rainmodel.make_kernel_bank(config.RainConfig(small_size=4))

    def test_two_groups_required(self):
        with pytest.raises(ValueError):
            rainmodel.KernelBank([np.array([[1.0]]), np.array([[1.0]])], [0, 0])


class TestComposeRainy:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.background = data.Frame(rng.uniform(0.0, 0.6, (16, 16, 3)).astype(np.float32))
        self.rain = data.Frame(rng.uniform(0.0, 0.3, (16, 16, 3)).astype(np.float32))

    def test_lam_one_is_plain_sum(self):
        out = rainmodel.compose_rainy(self.background, self.rain, 1.0, box_bank())
        expected = np.clip(self.background.pixels.astype(np.float64)
                           + self.rain.pixels.astype(np.float64), 0, 1)
        np.testing.assert_array_equal(out.pixels, expected.astype(np.float32))

    def test_lam_one_ignores_bank(self):
        outs = []
        for seed in range(4):
            rng = np.random.default_rng(seed)
            kernels = [k / k.sum() for k in rng.uniform(0.01, 1.0, (2, 3, 3))]
            bank = rainmodel.KernelBank(kernels, [0, 1])
            outs.append(rainmodel.compose_rainy(self.background, self.rain, 1.0, bank).pixels)
        for other in outs[1:]:
            np.testing.assert_array_equal(outs[0], other)

    def test_lam_zero_delta_bank(self):
        out = rainmodel.compose_rainy(self.background, self.rain, 0.0, delta_bank())
        expected = np.clip(self.background.pixels.astype(np.float64)
                           + self.rain.pixels.astype(np.float64), 0, 1)
        np.testing.assert_allclose(out.pixels, expected, atol=1e-6)

    def test_lam_half_delta_bank(self):
        out = rainmodel.compose_rainy(self.background, self.rain, 0.5, delta_bank())
        expected = np.clip(self.background.pixels.astype(np.float64)
                           + self.rain.pixels.astype(np.float64), 0, 1)
        np.testing.assert_allclose(out.pixels, expected, atol=1e-6)

    def test_spatial_weight_map(self):
        rng = np.random.default_rng(11)
        lam = rng.uniform(0.0, 1.0, (16, 16))
        bank = box_bank()
        out = rainmodel.compose_rainy(self.background, self.rain, lam, bank)
        b = self.background.pixels.astype(np.float64)
        r = self.rain.pixels.astype(np.float64)
        filtered = np.zeros_like(r)
        for c in range(3):
            for i in range(2):
                k = bank.kernel(i).double().numpy()
                filtered[:, :, c] += float(bank.weights[i].detach()) \
                    * conv_reflect_oracle(r[:, :, c], k)
        expected = np.clip(lam[:, :, None] * (b + r)
                           + (1.0 - lam[:, :, None]) * (b + filtered), 0, 1)
        np.testing.assert_allclose(out.pixels, expected, atol=1e-6)

    def test_shape_mismatch(self):
        small = data.Frame(np.zeros((8, 8, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            rainmodel.compose_rainy(self.background, small, 1.0, delta_bank())

    def test_bad_lam_rejected(self):
        with pytest.raises(ValueError):
            rainmodel.compose_rainy(self.background, self.rain, 1.5, delta_bank())


class TestCoarseRain:
    def test_zero_final_conv_is_identity(self):
        est = ResidualBlock(3, hidden=4)
        with torch.no_grad():
            est.layers[2][0].weight.zero_()
            est.layers[2][0].bias.zero_()
        x = torch.rand(1, 3, 16, 16)
        torch.testing.assert_close(rainmodel.estimate_coarse_rain(x, est), x)

    def test_pure(self):
        est = ResidualBlock(3, hidden=4)
        x = torch.rand(2, 3, 16, 16)
        a = rainmodel.estimate_coarse_rain(x, est)
        b = rainmodel.estimate_coarse_rain(x, est)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_shape_preserved(self):
        est = ResidualBlock(3, hidden=4)
        x = torch.rand(1, 3, 64, 64)
        assert rainmodel.estimate_coarse_rain(x, est).shape == x.shape


class TestGenerateAuxRain:
    def test_zero_weights_identity(self):
        bank = box_bank(weights=(0.0, 0.0))
        x = torch.rand(3, 16, 16)
        torch.testing.assert_close(rainmodel.generate_aux_rain(x, bank), x, rtol=0, atol=0)

    def test_delta_doubles(self):
        x = torch.rand(3, 16, 16)
        torch.testing.assert_close(rainmodel.generate_aux_rain(x, delta_bank()), 2.0 * x)

    def test_matches_bruteforce_oracle(self):
        bank = box_bank()
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (16, 16)).astype(np.float64)
        x = torch.from_numpy(np.stack([img] * 3)).double()
        got = rainmodel.generate_aux_rain(x, bank).detach().numpy()[0]
        expected = img.copy()
        for kernel, w in zip((bank.kernel(0), bank.kernel(1)), bank.weights.detach()):
            expected += float(w) * conv_reflect_oracle(img, kernel.double().numpy())
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_linear_operator(self):
        bank = box_bank()
        rng = np.random.default_rng(3)
        x = torch.from_numpy(rng.uniform(-1, 1, (3, 12, 12))).double()
        y = torch.from_numpy(rng.uniform(-1, 1, (3, 12, 12))).double()
        a, b = 0.7, -1.3
        lhs = rainmodel.generate_aux_rain(a * x + b * y, bank)
        rhs = a * rainmodel.generate_aux_rain(x, bank) + b * rainmodel.generate_aux_rain(y, bank)
        torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-6)


class _ZeroEstimator(torch.nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


class TestAugmentFrame:
    def test_zero_estimate_is_identity(self):
        x = torch.rand(1, 3, 16, 16)
        out = rainmodel.augment_frame(x, box_bank(), _ZeroEstimator())
        torch.testing.assert_close(out, x, rtol=0, atol=0)

    def test_nonnegative_rain_only_brightens(self):
        torch.manual_seed(4)
        est = ResidualBlock(3, hidden=4)
        bank = box_bank(weights=(0.3, 0.2))
        x = torch.rand(1, 3, 16, 16) * 0.5
        coarse = rainmodel.estimate_coarse_rain(x, est)
        assert coarse.min() >= 0.0  # relu-terminated residual on nonneg input
        aux = rainmodel.generate_aux_rain(coarse, bank)
        assert aux.min() >= 0.0
        out = rainmodel.augment_frame(x, bank, est)
        assert (out >= x - 1e-7).all()

    def test_output_clipped(self):
        torch.manual_seed(5)
        est = ResidualBlock(3, hidden=4)
        out = rainmodel.augment_frame(torch.rand(1, 3, 16, 16), box_bank(), est)
        assert out.min() >= 0.0 and out.max() <= 1.0
