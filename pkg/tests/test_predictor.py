import math

import numpy as np
import pytest
import torch

from dri_iqa.data import dead_leaves
from dri_iqa.dre import Encoder, split_representation, to_tensor
from dri_iqa.predictor import (
    ChannelFusion,
    CrossAttention,
    Predictor,
    PredictorError,
    fuse_channels,
    guided_score,
    predict_mos,
    random_crops,
)


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    enc = Encoder(dim=32, widths=(8, 8, 16, 16)).eval()
    pred = Predictor(rep_dim=32, width=32, heads=4).eval()
    return enc, pred


class TestFusion:
    def test_shape_sweep(self):
        q = torch.randn(1, 8, 3, 5)
        for c0 in range(8, 257, 8):
            for c in range(8, 257, 8):
                fused = ChannelFusion(c0, c)
                out = fused(q.repeat(1, c0 // 8, 1, 1))
                assert out.shape == (1, c, 3, 5)

    def test_default_widths(self):
        out = fuse_channels(torch.randn(2, 64, 4, 4), 128)
        assert out.shape == (2, 128, 4, 4)

    def test_deterministic(self):
        fusion = ChannelFusion(16, 32)
        q = torch.randn(1, 16, 4, 4)
        assert torch.equal(fuse_channels(q, 32, fusion), fuse_channels(q, 32, fusion))

    def test_gradients_reach_input_and_weights(self):
        fusion = ChannelFusion(16, 32)
        q = torch.randn(1, 16, 4, 4, requires_grad=True)
        fuse_channels(q, 32, fusion).square().sum().backward()
        assert q.grad.abs().sum() > 0
        assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in fusion.parameters())

    @pytest.mark.parametrize("c", [0, -4])
    def test_non_positive_rejected(self, c):
        with pytest.raises(PredictorError):
            fuse_channels(torch.randn(1, 8, 2, 2), c)

    def test_width_mismatch(self):
        with pytest.raises(PredictorError):
            fuse_channels(torch.randn(1, 8, 2, 2), 16, ChannelFusion(8, 32))


class TestGuidedScore:
    def test_single_finite_real(self, models):
        enc, pred = models
        with torch.no_grad():
            s = guided_score(enc, pred, dead_leaves(64, 1))
        assert s.shape == (1,) and torch.isfinite(s).all()

    def test_rep_dim_mismatch(self, models):
        _, pred = models
        other = Encoder(dim=16, widths=(8, 8, 16, 16)).eval()
        with pytest.raises(PredictorError, match="32-channel"):
            guided_score(other, pred, dead_leaves(64, 1))

    def test_degradation_half_unused(self, models):
        enc, pred = models
        x = to_tensor(dead_leaves(64, 2))
        with torch.no_grad():
            dual, _ = enc(x)
            upper, lower = split_representation(dual)
            altered = torch.cat([torch.randn_like(upper), lower], dim=1)
            assert torch.equal(pred(x, dual), pred(x, altered))

    def test_kv_permutation_without_positions(self):
        torch.manual_seed(1)
        pred = Predictor(rep_dim=16, width=16, heads=2, positional=False).eval()
        q = torch.randn(1, 8, 4, 4)
        kv = torch.randn(1, 16, 16)
        perm = torch.randperm(16)
        with torch.no_grad():
            a = pred.score_from_tokens(q, kv, (4, 4))
            b = pred.score_from_tokens(q, kv[:, perm], (4, 4))
        assert torch.allclose(a, b, atol=1e-6)

    def test_uniform_attention_is_mean_value(self):
        torch.manual_seed(2)
        attn = CrossAttention(16, heads=4)
        attn.uniform = True
        x, ctx = torch.randn(1, 5, 16), torch.randn(1, 9, 16)
        v = ctx @ attn.kv.weight[16:].T + attn.kv.bias[16:]
        expected = attn.proj(v.mean(dim=1))
        out = attn(x, ctx)
        assert torch.allclose(out, expected[:, None].expand_as(out), atol=1e-6)

    def test_uniform_attention_score_closed_form(self):
        torch.manual_seed(3)
        pred = Predictor(rep_dim=16, width=16, heads=2, n_guidance=1, n_transformer=0).eval()
        block = pred.guidance[0]
        block.attn.uniform = True
        quality = torch.randn(1, 8, 3, 3)
        kv = torch.randn(1, 12, 16)
        with torch.no_grad():
            score = pred.score_from_tokens(quality, kv, (4, 3))
            q = pred.fusion[0](quality).flatten(2).transpose(1, 2)
            values = block.norm_kv(kv) @ block.attn.kv.weight[16:].T + block.attn.kv.bias[16:]
            t = q + block.attn.proj(values.mean(dim=1))[:, None]
            t = t + block.mlp(block.norm_mlp(t))
            expected = pred.head(pred.norm(t.mean(dim=1))).squeeze(-1)
        assert torch.allclose(score, expected, atol=1e-6)

    def test_channel_attention_runs(self):
        torch.manual_seed(4)
        enc = Encoder(dim=32, widths=(8, 8, 16, 16)).eval()
        pred = Predictor(rep_dim=32, width=32, heads=4, attention="channel").eval()
        with torch.no_grad():
            assert torch.isfinite(guided_score(enc, pred, dead_leaves(64, 3))).all()

    def test_finite_on_random_inputs(self, models):
        enc, pred = models
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for _ in range(10):
                x = torch.rand(100, 3, 64, 64, generator=g)
                dual, _ = enc(x)
                assert torch.isfinite(pred(x, dual)).all()


class TestPredictMos:
    def test_single_crop_is_guided_score(self, models):
        enc, pred = models
        img = dead_leaves(96, 4)
        out = predict_mos(enc, pred, img, crop=64, n_crops=1, seed=3)
        crop = random_crops(img, 64, 1, 3)[0]
        with torch.no_grad():
            assert out.score == float(guided_score(enc, pred, crop)[0])
        assert out.crop_count == 1

    def test_same_seed_identical(self, models):
        enc, pred = models
        img = dead_leaves(96, 5)
        a = predict_mos(enc, pred, img, crop=64, n_crops=5, seed=1)
        b = predict_mos(enc, pred, img, crop=64, n_crops=5, seed=1)
        assert a.per_crop_scores == b.per_crop_scores

    def test_constant_image(self, models):
        enc, pred = models
        img = np.full((96, 96, 3), 0.4, np.float32)
        out = predict_mos(enc, pred, img, crop=64, n_crops=25, seed=0)
        assert len(set(out.per_crop_scores)) == 1
        assert out.crop_count == 25

    def test_mean_contract(self, models):
        enc, pred = models
        out = predict_mos(enc, pred, dead_leaves(128, 6), crop=64, n_crops=9, seed=2)
        assert abs(out.score - np.mean(out.per_crop_scores)) < 1e-9
        shuffled = list(reversed(out.per_crop_scores))
        assert math.fsum(shuffled) / len(shuffled) == out.score

    def test_undersized_rejected(self, models):
        enc, pred = models
        with pytest.raises(PredictorError, match="64x64"):
            predict_mos(enc, pred, dead_leaves(48, 7), crop=64)

    def test_restores_training_mode(self, models):
        enc, pred = models
        enc.train(), pred.train()
        try:
            predict_mos(enc, pred, dead_leaves(64, 8), crop=64, n_crops=1)
            assert enc.training and pred.training
        finally:
            enc.eval(), pred.eval()
