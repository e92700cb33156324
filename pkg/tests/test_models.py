import math

import numpy as np
import pytest

from voxfuse import tensor as tz
from voxfuse.alignment import build_mask, proportional_alignment
from voxfuse.data import BOS, EOS
from voxfuse.models import (AcousticModel, AdapterError, FusedModel, FusionLayer,
                            LanguageModel, apply_adapters, cross_modal_fuse,
                            param_report)
from voxfuse.tensor import Tensor


@pytest.fixture
def fused_model():
    acoustic = AcousticModel(seed=1)
    lm = LanguageModel(seed=2)
    fusion = FusionLayer(seed=3)
    return FusedModel(acoustic, lm, fusion, injection=3, mode="causal")


def random_audio(rng, S, d_a=48):
    return rng.standard_normal((S, d_a)).astype(np.float32)


class TestFusionLayer:
    def test_zero_value_projection_is_identity(self):
        layer = FusionLayer(seed=0, d=4, d_a=3)
        layer.v.w.data[:] = 0.0
        rng = np.random.default_rng(0)
        h = rng.standard_normal((5, 4)).astype(np.float32)
        a = rng.standard_normal((7, 3)).astype(np.float32)
        mask = build_mask(proportional_alignment(5, 7), "causal")
        out = cross_modal_fuse(h, a, layer, mask)
        assert np.array_equal(out.data, h)

    def test_singleton_softmax_weight_one(self):
        layer = FusionLayer(seed=0, d=4, d_a=3)
        rng = np.random.default_rng(1)
        h = rng.standard_normal((1, 4)).astype(np.float32)
        a = rng.standard_normal((1, 3)).astype(np.float32)
        mask = build_mask(proportional_alignment(1, 1), "causal")
        out = cross_modal_fuse(h, a, layer, mask)
        expect = h + a @ layer.v.w.data
        assert np.max(np.abs(out.data - expect)) <= 1e-6

    def test_against_per_row_oracle(self):
        layer = FusionLayer(seed=5, d=4, d_a=3)
        rng = np.random.default_rng(2)
        h = rng.standard_normal((3, 4)).astype(np.float32)
        a = rng.standard_normal((5, 3)).astype(np.float32)
        mask = build_mask(proportional_alignment(3, 5), "causal")
        out = cross_modal_fuse(h, a, layer, mask).data

        # independent 64-bit per-row attention oracle
        Q = layer.q.w.data.astype(np.float64)
        K = layer.k.w.data.astype(np.float64)
        V = layer.v.w.data.astype(np.float64)
        h64, a64 = h.astype(np.float64), a.astype(np.float64)
        for t in range(3):
            s_t = (5 * t) // 3
            scores = [(h64[t] @ Q) @ (a64[s] @ K) / math.sqrt(4)
                      for s in range(s_t + 1)]
            e = np.exp(scores - np.max(scores))
            w = e / e.sum()
            row = h64[t] + sum(w[s] * (a64[s] @ V) for s in range(s_t + 1))
            assert np.max(np.abs(out[t] - row)) <= 1e-5

    def test_masked_frames_contribute_zero(self):
        layer = FusionLayer(seed=0, d=4, d_a=3)
        rng = np.random.default_rng(3)
        h = rng.standard_normal((2, 4)).astype(np.float32)
        a = rng.standard_normal((6, 3)).astype(np.float32)
        mask = build_mask(proportional_alignment(2, 6), "causal")
        base = cross_modal_fuse(h, a, layer, mask).data
        a2 = a.copy()
        a2[5] += 100.0  # beyond s_1 = 3
        assert np.array_equal(cross_modal_fuse(h, a2, layer, mask).data, base)

    def test_shape_errors(self):
        layer = FusionLayer(seed=0, d=4, d_a=3)
        mask = build_mask(proportional_alignment(2, 2), "causal")
        with pytest.raises(tz.ShapeError):
            cross_modal_fuse(np.zeros((2, 5), np.float32),
                             np.zeros((2, 3), np.float32), layer, mask)
        with pytest.raises(tz.ShapeError):
            cross_modal_fuse(np.zeros((3, 4), np.float32),
                             np.zeros((2, 3), np.float32), layer, mask)


class TestLmForward:
    def test_mode_none_is_plain_forward(self, fused_model):
        tokens = [BOS, 1, 2, 3]
        a = fused_model.lm_forward(tokens, mode="none").data
        b = fused_model.lm.forward(tokens).data
        assert np.array_equal(a, b)

    def test_mode_requires_audio(self, fused_model):
        with pytest.raises(ValueError, match="requires audio"):
            fused_model.lm_forward([BOS, 1], mode="causal")

    def test_none_rejects_audio(self, fused_model):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            fused_model.lm_forward([BOS, 1], audio=random_audio(rng, 2), mode="none")

    def test_empty_tokens_rejected(self, fused_model):
        with pytest.raises(ValueError, match="non-empty"):
            fused_model.lm_forward([], mode="none")

    def test_residual_identity_with_zero_value(self, fused_model):
        fused_model.fusion.v.w.data[:] = 0.0
        rng = np.random.default_rng(1)
        tokens = [BOS, 4, 5, 6, 7]
        audio = random_audio(rng, 5)
        for mode in ("causal", "full"):
            fused = fused_model.lm_forward(tokens, audio=audio, mode=mode).data
            plain = fused_model.lm_forward(tokens, mode="none").data
            assert np.max(np.abs(fused - plain)) <= 1e-7

    def test_causal_information_barrier(self, fused_model):
        rng = np.random.default_rng(2)
        tokens = [BOS, 1, 2, 3, 4]
        audio = random_audio(rng, 5)
        base = fused_model.lm_forward(tokens, audio=audio, mode="causal").data
        # perturb frame s=4; rows with s_t < 4 must be unchanged
        audio2 = audio.copy()
        audio2[4] += 1.0
        out = fused_model.lm_forward(tokens, audio=audio2, mode="causal").data
        assert np.max(np.abs(out[:4] - base[:4])) <= 1e-7
        assert np.max(np.abs(out[4] - base[4])) > 0

    def test_full_sequence_sensitivity(self, fused_model):
        rng = np.random.default_rng(3)
        tokens = [BOS, 1, 2, 3, 4]
        audio = random_audio(rng, 5)
        base = fused_model.lm_forward(tokens, audio=audio, mode="full").data
        audio2 = audio.copy()
        audio2[4] += 1.0
        out = fused_model.lm_forward(tokens, audio=audio2, mode="full").data
        assert np.max(np.abs(out[0] - base[0])) > 1e-4

    def test_injection_locality(self, fused_model):
        rng = np.random.default_rng(4)
        tokens = [BOS, 1, 2, 3]
        audio = random_audio(rng, 4)
        _, h_none = fused_model.lm_forward(tokens, mode="none", collect_hidden=True)
        _, h_causal = fused_model.lm_forward(tokens, audio=audio, mode="causal",
                                             collect_hidden=True)
        I = fused_model.injection
        for layer in range(I - 1):  # strictly below the injection layer
            assert np.array_equal(h_none[layer], h_causal[layer])
        assert not np.array_equal(h_none[I - 1], h_causal[I - 1])

    def test_frozen_acoustic_gets_no_gradient(self, fused_model):
        fused_model.acoustic.freeze()
        rng = np.random.default_rng(5)
        frames = rng.standard_normal((12, 8)).astype(np.float32)
        tokens = [1, 2, 3]
        _, hidden = fused_model.acoustic.forward(frames, tokens)
        logits = fused_model.lm_forward([BOS] + tokens, audio=hidden, mode="causal")
        loss = tz.cross_entropy(logits, tokens + [EOS])
        loss.backward()
        for _, p in fused_model.acoustic.params():
            assert p.grad is None
        assert fused_model.fusion.v.w.grad is not None


class TestAcousticModel:
    def test_deterministic_hidden(self):
        rng = np.random.default_rng(0)
        frames = rng.standard_normal((10, 8)).astype(np.float32)
        a1 = AcousticModel(seed=7)
        a2 = AcousticModel(seed=7)
        _, h1 = a1.forward(frames, [1, 2])
        _, h2 = a2.forward(frames, [1, 2])
        assert np.array_equal(h1.data, h2.data)

    def test_hidden_shape_is_teacher_length_by_da(self):
        rng = np.random.default_rng(1)
        frames = rng.standard_normal((10, 8)).astype(np.float32)
        model = AcousticModel(seed=0)
        _, hidden = model.forward(frames, [1, 2, 3])
        assert hidden.shape == (4, 48)  # BOS + 3 teacher tokens

    def test_empty_frames_rejected(self):
        model = AcousticModel(seed=0)
        with pytest.raises(ValueError, match="non-empty"):
            model.forward(np.zeros((0, 8), np.float32), [1])

    def test_greedy_decode_truncation_flag(self):
        rng = np.random.default_rng(2)
        frames = rng.standard_normal((8, 8)).astype(np.float32)
        model = AcousticModel(seed=0)  # untrained: unlikely to emit EOS in time
        tokens, hidden, truncated = model.greedy_decode(frames, max_len=3)
        assert len(tokens) <= 3
        assert hidden.shape == (len(tokens) + 1, 48)
        if len(tokens) == 3:
            assert truncated


class TestAdapters:
    def test_zero_initialized_adapter_is_identity(self):
        lm1 = LanguageModel(seed=9)
        lm2 = LanguageModel(seed=9)
        apply_adapters(lm2, r=8, alpha=16.0, dropout=0.1)
        tokens = [BOS, 3, 1, 2]
        with tz.no_grad():
            a = lm1.forward(tokens).data
            b = lm2.forward(tokens).data
        assert np.array_equal(a, b)

    def test_config_echoed_in_report(self):
        lm = LanguageModel(seed=0)
        report = apply_adapters(lm, r=8, alpha=16.0, dropout=0.1)
        assert (report["r"], report["alpha"], report["dropout"]) == (8, 16.0, 0.1)
        assert 0 < report["trainable"] <= report["total"]

    def test_trainable_fraction_matches_hand_count(self):
        layer = FusionLayer(seed=0, d=8, d_a=8)
        report = apply_adapters(layer, r=2, alpha=4.0, dropout=0.0)
        # base: three 8x8 projections; adapters: three (8x2 + 2x8)
        assert report["total"] == 3 * 64 + 3 * 32
        assert report["trainable"] == report["total"]
        assert report["fraction"] == 1.0

    def test_rank_too_large_rejected(self):
        layer = FusionLayer(seed=0, d=4, d_a=3)
        with pytest.raises(AdapterError):
            apply_adapters(layer, r=5, alpha=8.0, dropout=0.0)

    def test_effective_weight_formula(self):
        lm = LanguageModel(seed=1)
        apply_adapters(lm, r=4, alpha=8.0, dropout=0.0)
        proj = lm.blocks[0].wq
        rng = np.random.default_rng(0)
        proj.b.data[:] = rng.standard_normal(proj.b.data.shape)
        x = rng.standard_normal((3, 64)).astype(np.float32)
        with tz.no_grad():
            out = proj(Tensor(x)).data
        expect = x @ proj.w.data + (8.0 / 4) * ((x @ proj.a.data) @ proj.b.data)
        assert np.max(np.abs(out - expect)) <= 1e-5


def test_param_report_by_prefix(fused_model):
    fused_model.acoustic.freeze()
    report = param_report(fused_model.named_params())
    assert report["by_prefix"]["acoustic"]["trainable"] == 0
    assert report["by_prefix"]["acoustic"]["total"] > 0
    total = sum(v["total"] for v in report["by_prefix"].values())
    assert total == report["total"]
