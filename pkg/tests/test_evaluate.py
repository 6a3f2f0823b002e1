import math

import numpy as np
import pytest
import torch

from tmics import evaluate, networks
from conftest import make_toy_pairs, tiny_model_config


def identity_model(frames=3):
    cfg = tiny_model_config(cell_spec="res3,res3,res3,res3", macro="tgm", frames=frames)
    cfg.model.use_gars = False
    torch.manual_seed(3)
    return networks.identity_init(networks.build_model(cfg))


class TestInferSequence:
    @pytest.mark.parametrize("t,w", [(1, 3), (2, 3), (5, 5), (9, 7), (3, 7)])
    def test_output_length_matches_input(self, t, w):
        model = identity_model()
        pairs = make_toy_pairs(n_sequences=1, n_frames=t, size=16)
        restored = evaluate.infer_sequence(model, pairs[0][0], w)
        assert len(restored) == t

    def test_identity_model_reproduces_input(self):
        model = identity_model()
        pairs = make_toy_pairs(n_sequences=1, n_frames=3, size=16)
        restored = evaluate.infer_sequence(model, pairs[0][0], 3)
        for out_f, in_f in zip(restored.frames, pairs[0][0].frames):
            np.testing.assert_allclose(out_f.pixels, in_f.pixels, atol=1e-6)

    def test_deterministic(self):
        cfg = tiny_model_config(cell_spec="res3,attn_spatial,dil3,attn_channel", macro="ofm")
        torch.manual_seed(7)
        model = networks.build_model(cfg)
        seq = make_toy_pairs(n_sequences=1, n_frames=4, size=16)[0][0]
        a = evaluate.infer_sequence(model, seq, 3)
        b = evaluate.infer_sequence(model, seq, 3)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.pixels, fb.pixels)


class TestEvaluatePairs:
    def test_identical_restored_and_clean(self):
        pairs = make_toy_pairs(n_sequences=2, n_frames=3, size=16)
        clean_pairs = [(clean, clean) for _, clean in pairs]
        report = evaluate.evaluate_pairs(None, clean_pairs, w=3)
        assert report.ssim_restored == pytest.approx(1.0, abs=1e-9)
        assert math.isinf(report.psnr_restored)
        assert report.psnr_inf_restored == report.frames

    def test_identity_model_matches_baseline(self):
        pairs = make_toy_pairs(n_sequences=2, n_frames=3, size=16)
        report = evaluate.evaluate_pairs(None, pairs, w=3)
        assert report.psnr_restored == pytest.approx(report.psnr_input, abs=1e-12)
        assert report.ssim_restored == pytest.approx(report.ssim_input, abs=1e-12)

    def test_aggregate_is_frame_weighted_mean(self):
        a = make_toy_pairs(n_sequences=1, n_frames=3, size=16, seed=1)[0]
        b = make_toy_pairs(n_sequences=1, n_frames=7, size=16, seed=2)[0]
        report = evaluate.evaluate_pairs(None, [a, b], w=3)
        total = sum(s.frames for s in report.sequences)
        weighted_ssim = sum(s.ssim_input * s.frames for s in report.sequences) / total
        assert report.ssim_input == pytest.approx(weighted_ssim, abs=1e-9)
        weighted_psnr = sum(s.psnr_input * s.frames for s in report.sequences) / total
        assert report.psnr_input == pytest.approx(weighted_psnr, abs=1e-9)
        assert report.frames == total

    def test_report_text_and_table(self):
        pairs = make_toy_pairs(n_sequences=1, n_frames=3, size=16)
        report = evaluate.evaluate_pairs(None, pairs, w=3, config_hash="cafe")
        text = evaluate.report_to_text(report)
        assert "psnr_input = " in text and "config_hash = cafe" in text
        assert f"seq.{pairs[0][0].identifier}.frames = 3" in text
        table = evaluate.report_table(report)
        assert "sequence" in table and pairs[0][0].identifier in table

    def test_infinite_psnr_rendered_as_inf(self):
        pairs = make_toy_pairs(n_sequences=1, n_frames=3, size=16)
        clean_pairs = [(clean, clean) for _, clean in pairs]
        text = evaluate.report_to_text(evaluate.evaluate_pairs(None, clean_pairs, w=3))
        assert "psnr_restored = inf" in text
