import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tmics import ConfigurationError, networks
from tmics.searchspace import HEAVY_SPEC, LIGHT_SPEC, ResidualBlock
from conftest import tiny_model_config


def random_aas(seed, hidden=8, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    aas = networks.FusionAttention(hidden)
    with torch.no_grad():
        for p in aas.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.3)
    return aas.to(dtype)


class TestBranch:
    def test_zero_head_is_identity(self):
        branch = networks.Branch(8, 1, LIGHT_SPEC).zero_head_()
        x = torch.rand(2, 3, 16, 16)
        torch.testing.assert_close(branch(x), x, rtol=0, atol=0)

    def test_output_clamped(self):
        torch.manual_seed(0)
        branch = networks.Branch(8, 1, HEAVY_SPEC)
        out = branch(torch.rand(1, 3, 16, 16))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_unclamped_for_training(self):
        torch.manual_seed(1)
        branch = networks.Branch(8, 1, LIGHT_SPEC)
        with torch.no_grad():
            branch.head.bias.fill_(5.0)
        out = branch(torch.rand(1, 3, 16, 16), clamp=False)
        assert out.min() < 0.0

    def test_mode_mismatch(self):
        relaxed = networks.Branch(8, 1, None)
        with pytest.raises(ConfigurationError):
            relaxed(torch.rand(1, 3, 16, 16))
        discrete = networks.Branch(8, 1, LIGHT_SPEC)
        with pytest.raises(ConfigurationError):
            discrete(torch.rand(1, 3, 16, 16), micro_logits=torch.zeros(4, 8))


class TestFusionAttention:
    def test_equal_inputs_give_exact_half(self):
        aas = random_aas(2)
        x = torch.rand(2, 3, 16, 16)
        w = aas(x, x)
        assert torch.all(w.dominant == 0.5) and torch.all(w.companion == 0.5)

    def test_pair_sums_to_one(self):
        aas = random_aas(3, dtype=torch.float64)
        a = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        b = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        w = aas(a, b)
        torch.testing.assert_close(w.dominant + w.companion, torch.ones_like(w.dominant),
                                   rtol=0, atol=1e-9)

    def test_strictly_interior(self):
        aas = random_aas(4)
        a = torch.rand(3, 3, 16, 16)
        b = torch.rand(3, 3, 16, 16)
        w = aas(a, b)
        assert (w.dominant > 0).all() and (w.dominant < 1).all()

    def test_swap_symmetry_exact(self):
        aas = random_aas(5)
        a = torch.rand(2, 3, 16, 16)
        b = torch.rand(2, 3, 16, 16)
        w_ab = aas(a, b)
        w_ba = aas(b, a)
        assert torch.equal(w_ab.dominant, w_ba.companion)
        assert torch.equal(w_ab.companion, w_ba.dominant)

    def test_default_init_starts_neutral(self):
        aas = networks.FusionAttention(8)
        a = torch.rand(1, 3, 16, 16)
        b = torch.rand(1, 3, 16, 16)
        w = aas(a, b)
        assert torch.all(w.dominant == 0.5)


class TestFuse:
    def test_endpoints(self):
        a = torch.rand(1, 3, 12, 12)
        b = torch.rand(1, 3, 12, 12)
        ones = torch.ones(1, 3)
        zeros = torch.zeros(1, 3)
        torch.testing.assert_close(
            networks.fuse(a, b, networks.FusionWeights(ones, zeros)), a, rtol=0, atol=0)
        torch.testing.assert_close(
            networks.fuse(a, b, networks.FusionWeights(zeros, ones)), b, rtol=0, atol=0)

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_convexity(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.rand(1, 3, 8, 8, generator=g)
        b = torch.rand(1, 3, 8, 8, generator=g)
        lam = torch.rand(1, 3, generator=g)
        out = networks.fuse(a, b, networks.FusionWeights(lam, 1.0 - lam))
        lo = torch.minimum(a, b) - 1e-6
        hi = torch.maximum(a, b) + 1e-6
        assert ((out >= lo) & (out <= hi)).all()

    def test_degenerate_consistency(self):
        aas = random_aas(6)
        a = torch.rand(1, 3, 16, 16)
        b = torch.rand(1, 3, 16, 16)
        w = aas(a, a)  # equal inputs to the attention
        torch.testing.assert_close(networks.fuse(a, b, w), 0.5 * a + 0.5 * b, rtol=0, atol=0)


class TestResidualBlock:
    def test_zero_last_conv_identity(self):
        block = ResidualBlock(3, hidden=4)
        with torch.no_grad():
            block.layers[2][0].weight.zero_()
            block.layers[2][0].bias.zero_()
        x = torch.rand(1, 3, 12, 12)
        torch.testing.assert_close(block(x), x, rtol=0, atol=0)

    def test_shape(self):
        block = ResidualBlock(3, hidden=4)
        assert block(torch.rand(2, 3, 20, 24)).shape == (2, 3, 20, 24)

    def test_nonlinear(self):
        torch.manual_seed(7)
        block = ResidualBlock(3, hidden=4)
        x = torch.rand(1, 3, 12, 12)
        assert not torch.allclose(block(2.0 * x), 2.0 * block(x))


class TestTripleModel:
    def _model(self, **kwargs):
        cfg = tiny_model_config(**kwargs)
        torch.manual_seed(11)
        return networks.build_model(cfg), cfg

    def test_deterministic_forward(self):
        model, _ = self._model()
        windows = torch.rand(2, 3, 3, 16, 16)
        a = model(windows)
        b = model(windows)
        torch.testing.assert_close(a.fused, b.fused, rtol=0, atol=0)

    def test_shape_contract(self):
        model, _ = self._model(frames=5)
        out = model(torch.rand(1, 5, 3, 24, 24))
        assert out.fused.shape == (1, 3, 24, 24)

    def test_fused_in_convex_hull(self):
        model, _ = self._model()
        out = model(torch.rand(1, 3, 3, 16, 16), use_aas=True)
        lo = torch.minimum(out.dominant, out.companion) - 1e-6
        hi = torch.maximum(out.dominant, out.companion) + 1e-6
        assert ((out.fused >= lo) & (out.fused <= hi)).all()

    def test_gars_disabled_feeds_identical_inputs(self):
        model, _ = self._model()
        model.use_gars = False
        out = model(torch.rand(1, 3, 3, 16, 16))
        torch.testing.assert_close(out.augmented, out.aligned, rtol=0, atol=0)

    def test_identity_initialised_model(self):
        cfg = tiny_model_config(cell_spec="res3,res3,res3,res3", macro="tgm")
        cfg.model.use_gars = False
        torch.manual_seed(12)
        model = networks.identity_init(networks.build_model(cfg))
        windows = torch.rand(1, 3, 3, 16, 16)
        out = model(windows, clamp=True)
        torch.testing.assert_close(out.fused, windows[:, 1], rtol=0, atol=1e-6)

    def test_gradient_connectivity(self):
        cfg = tiny_model_config()  # relaxed, mixed macro
        torch.manual_seed(13)
        model = networks.build_model(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        seen = {name: False for name, _ in model.named_parameters()}
        for step in range(3):
            windows = torch.rand(2, 3, 3, 16, 16) * 0.5 + 0.1
            gt = torch.rand(2, 3, 16, 16)
            out = model(windows, use_aas=True)
            loss = ((out.fused - gt) ** 2).mean() + ((out.dominant - gt) ** 2).mean() \
                + ((out.companion - gt) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            for name, p in model.named_parameters():
                if p.grad is not None and p.grad.abs().max() > 0:
                    seen[name] = True
            opt.step()
        missing = [name for name, hit in seen.items() if not hit]
        assert not missing, f"params with no gradient after 3 batches: {missing}"
