"""U-Net assembly: variants, determinism, conditioning structure, audits,
and chunked separation."""

import dataclasses

import numpy as np
import pytest

from latsep.blocks import make_query_batch
from latsep.errors import ConditionError, ConfigError, DimensionError
from latsep.model import (CONDITION_NAMES, ModelConfig, build, condition,
                          count_parameters, desk_config, gradcheck_config,
                          reference_config, separate_track)
from latsep.numerics import Tensor, grad_check, no_grad
from latsep.spectro import AudioClip, StftConfig, stft
from latsep.train import mse_loss

VARIANTS = ("lasaft", "lightsaft", "lightsaft_plus")


def tiny_input(cfg, T=5, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (cfg.spec_channels, cfg.freq_dim, T)
    if batch is not None:
        shape = (batch,) + shape
    return Tensor(rng.standard_normal(shape).astype(np.float32))


class TestConfig:
    def test_freq_divisibility_checked_before_allocation(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(num_scales=9, stft=StftConfig(512, 256))

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="unet")

    def test_json_roundtrip_rejects_unknown_keys(self):
        cfg = desk_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        doc = cfg.to_dict()
        doc["dropout"] = 0.5
        with pytest.raises(ConfigError, match="dropout"):
            ModelConfig.from_dict(doc)

    def test_condition_resolution(self):
        assert condition("bass") == condition(2)
        assert [condition(n).id for n in CONDITION_NAMES] == [0, 1, 2, 3]
        with pytest.raises(ConditionError, match="valid"):
            condition("piano")
        with pytest.raises(ConditionError):
            condition(7)


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a, b = build(desk_config(seed=3)), build(desk_config(seed=3))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a, b = build(desk_config(seed=0)), build(desk_config(seed=1))
        assert not np.array_equal(a.stem.kernels.data, b.stem.kernels.data)

    def test_lightsaft_plus_encoder_blocks_expose_no_query_input(self):
        m = build(gradcheck_config("lightsaft_plus"))
        for blk in m.enc_blocks:
            assert blk.conditioned is False
            with pytest.raises(TypeError):
                blk(tiny_input(m.cfg), None)
        assert m.bottleneck.conditioned is True
        assert all(blk.conditioned for blk in m.dec_blocks)

    def test_conditioned_everywhere_otherwise(self):
        for variant in ("lasaft", "lightsaft"):
            m = build(gradcheck_config(variant))
            assert all(blk.conditioned for blk in m.enc_blocks)
            assert m.bottleneck.conditioned


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_output_shape_matches_input(self, variant):
        m = build(gradcheck_config(variant))
        x = tiny_input(m.cfg, T=5)
        assert m(x, "vocals").shape == x.shape
        xb = tiny_input(m.cfg, T=7, batch=3)
        assert m(xb, ["vocals", "drums", "other"]).shape == xb.shape

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_zero_input_finite(self, variant):
        m = build(gradcheck_config(variant))
        x = Tensor(np.zeros((m.cfg.spec_channels, m.cfg.freq_dim, 4), np.float32))
        assert np.isfinite(m(x, "bass").data).all()

    @pytest.mark.parametrize("variant", ("lasaft", "lightsaft"))
    def test_condition_changes_output(self, variant):
        for seed in range(5):
            m = build(gradcheck_config(variant, seed=seed))
            x = tiny_input(m.cfg, seed=seed + 100)
            a = m(x, "vocals").data
            b = m(x, "drums").data
            assert np.linalg.norm(a - b) > 0

    def test_lightsaft_plus_encoder_condition_independent(self):
        m = build(gradcheck_config("lightsaft_plus"))
        x = tiny_input(m.cfg, batch=1)
        q0 = make_query_batch([0], m.cond_embedding)
        q3 = make_query_batch([3], m.cond_embedding)
        with no_grad():
            u0, skips0 = m.encode(x, q0)
            u3, skips3 = m.encode(x, q3)
        assert np.abs(u0.data - u3.data).max() == 0.0
        for s0, s3 in zip(skips0, skips3):
            assert np.abs(s0.data - s3.data).max() == 0.0

    def test_lightsaft_decoder_output_depends_on_condition(self):
        for seed in range(5):
            m = build(gradcheck_config("lightsaft_plus", seed=seed))
            x = tiny_input(m.cfg, seed=seed)
            assert np.linalg.norm(m(x, "vocals").data - m(x, "bass").data) > 0

    def test_condition_permutation_equivariance(self):
        m = build(gradcheck_config("lightsaft", seed=2))
        x = tiny_input(m.cfg, seed=5)
        perm = [2, 0, 3, 1]  # new_table[i] = old_table[perm[i]]
        with no_grad():
            want = [m(x, perm[i]).data.copy() for i in range(4)]
            m.cond_embedding.table.data[...] = m.cond_embedding.table.data[perm]
            got = [m(x, i).data for i in range(4)]
        for w, g in zip(want, got):
            assert np.array_equal(w, g)

    def test_shape_errors(self):
        m = build(gradcheck_config("lightsaft"))
        with pytest.raises(DimensionError, match="expects"):
            m(Tensor(np.zeros((2, 16, 4), np.float32)), "vocals")
        with pytest.raises(ConditionError):
            m(tiny_input(m.cfg), "piano")

    def test_eval_mode_deterministic(self):
        m = build(gradcheck_config("lightsaft")).eval()
        x = tiny_input(m.cfg)
        with no_grad():
            a = m(x, 1).data.copy()
            b = m(x, 1).data
        assert np.array_equal(a, b)


class TestParameterAudit:
    def test_breakdown_sums_to_total(self):
        audit = count_parameters(build(desk_config("lightsaft")))
        assert sum(audit["by_module"].values()) == audit["total"]

    def test_desk_ordering(self):
        totals = {v: count_parameters(build(desk_config(v)))["total"]
                  for v in VARIANTS}
        assert totals["lasaft"] > totals["lightsaft"] > totals["lightsaft_plus"]

    def test_desk_total_matches_block_sum_oracle(self):
        cfg = desk_config("lightsaft_plus")
        total = count_parameters(build(cfg))["total"]
        assert total == expected_total(cfg)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_formula_oracle_every_variant(self, variant):
        cfg = gradcheck_config(variant)
        assert count_parameters(build(cfg))["total"] == expected_total(cfg)

    def test_reference_config_lands_in_calibrated_window(self):
        totals = {v: count_parameters(build(reference_config(v)))["total"]
                  for v in VARIANTS}
        assert totals["lasaft"] > totals["lightsaft"] > totals["lightsaft_plus"]
        assert 3_400_000 <= totals["lightsaft"] <= 4_200_000
        assert totals["lightsaft_plus"] / totals["lightsaft"] <= 0.65


def expected_total(cfg: ModelConfig) -> int:
    """Architecture arithmetic written independently of Module bookkeeping."""
    C, c = 2 * cfg.audio_channels, cfg.internal_channels
    kf, kt = cfg.tfc_kernel
    S, dk, bf, L = cfg.num_latent, cfg.key_dim, cfg.bottleneck, cfg.tfc_layers

    def fc(i, o):
        return i * o + o + 2 * o  # weight + bias + bn scale/shift

    def tfc():
        return sum((c + i * c) * c * kf * kt + c + 2 * c for i in range(L))

    def tdf(F):
        h = max(1, F // bf)
        return fc(F, h) + fc(h, F)

    def ft(F, variant):
        h = max(1, F // bf)
        phase1 = S * fc(F, h)
        phase2 = S * fc(S * h, F) if variant == "lasaft" else fc(h, F)
        return phase1 + phase2 + S * dk  # + bank keys

    def block(F, encoder):
        if cfg.variant == "lightsaft_plus" and encoder:
            return tfc() + tdf(F)
        return tfc() + ft(F, "lasaft" if cfg.variant == "lasaft" else "lightsaft")

    F0 = cfg.stft.n_fft // 2
    total = cfg.num_conditions * dk  # condition embedding
    total += C * c * 1 * 2 + c  # stem (1,2)
    total += c * C * 2 * 1 + C  # head (2,1)
    for s in range(cfg.num_scales):
        total += block(F0 >> s, encoder=True)
        total += c * c * 9 + c  # down conv 3x3
        total += c * c * 4 + c  # up tconv 2x2
        total += 2 * c * c + c  # merge 1x1
        total += block(F0 >> s, encoder=False)
    total += block(F0 >> cfg.num_scales, encoder=False)  # bottleneck
    return total


@pytest.fixture(scope="module")
def model():
    return build(desk_config("lightsaft_plus"))


class TestSeparateTrack:
    def make_clip(self, seconds=2.0, sr=8000, seed=0):
        rng = np.random.default_rng(seed)
        n = int(seconds * sr)
        return AudioClip(0.2 * rng.standard_normal((1, n)).astype(np.float32), sr)

    def test_duration_preserved_exactly(self, model):
        for n in (16000, 16001, 12345):
            clip = AudioClip(0.1 * np.random.default_rng(0).standard_normal((1, n)), 8000)
            out = separate_track(model, clip, "vocals")
            assert out.n_samples == n
            assert out.sample_rate == clip.sample_rate

    def test_single_chunk_equals_direct_forward(self, model):
        clip = self.make_clip(seconds=2.0)
        out = separate_track(model, clip, "drums", chunk_seconds=10.0)
        spec = stft(clip, model.cfg.stft)
        model.eval()
        with no_grad():
            direct = model(spec.data, "drums").data
        from latsep.spectro import Spectrogram, istft
        want = istft(Spectrogram(Tensor(direct), model.cfg.stft,
                                 clip.sample_rate, clip.n_samples))
        num = np.linalg.norm(out.samples - want.samples)
        den = np.linalg.norm(want.samples) + 1e-12
        assert num / den < 1e-3

    def test_overlap_change_keeps_length(self, model):
        clip = self.make_clip(seconds=4.0)
        a = separate_track(model, clip, "bass", chunk_seconds=1.0,
                           overlap_fraction=0.25)
        b = separate_track(model, clip, "bass", chunk_seconds=1.0,
                           overlap_fraction=0.5)
        assert a.n_samples == b.n_samples == clip.n_samples

    def test_deterministic(self, model):
        clip = self.make_clip(seconds=3.0, seed=4)
        a = separate_track(model, clip, "other", chunk_seconds=1.0)
        b = separate_track(model, clip, "other", chunk_seconds=1.0)
        assert np.array_equal(a.samples, b.samples)

    def test_restores_training_mode(self, model):
        model.train()
        separate_track(model, self.make_clip(), "vocals")
        assert model.training


class TestFullModelGradient:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_desk_scale_gradcheck(self, seed):
        cfg = gradcheck_config("lightsaft", seed=seed)
        m = build(cfg, dtype=np.float64)
        rng = np.random.default_rng(200 + seed)
        x = Tensor(rng.standard_normal((cfg.spec_channels, cfg.freq_dim, 3)))
        t = Tensor(rng.standard_normal((cfg.spec_channels, cfg.freq_dim, 3)))
        rep = grad_check(lambda: mse_loss(m(x, "vocals"), t),
                         list(m.named_parameters()), h=1e-4, tol=1e-3)
        assert rep.passed, rep.summary()
