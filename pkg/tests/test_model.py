import os

import numpy as np
import pytest

from pysaan.autodiff import Tape, Tensor, backward, no_grad
from pysaan.errors import DimensionError, UsageError
from pysaan.gradcheck import finite_difference_check
from pysaan.losses import total_loss
from pysaan.model import (
    AblationFlags,
    AttentionState,
    DecoderConfig,
    EncoderConfig,
    SaanModel,
    SimilarityChannelAttention,
    SimilaritySpatialAttention,
    StageAttention,
    export_attention_maps,
    param_count,
    predict_proba,
    profile_cost,
    sca_block,
    ssa_block,
)
from pysaan.netpbm import read_image


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def conv7x7_loop(guide, conv):
    """Single-output 7x7 conv with zero padding 3, one tap at a time."""
    w, b = conv.weight.data[0], conv.bias.data[0]
    c, h, wd = guide.shape
    out = np.full((h, wd), b)
    for py in range(h):
        for px in range(wd):
            for ch in range(c):
                for qy in range(h):
                    for qx in range(wd):
                        out[py, px] += w[ch, 3 + qy - py, 3 + qx - px] * guide[ch, qy, qx]
    return out


def mlp_loop(v, mlp):
    hidden = np.maximum(mlp.fc1.weight.data @ v + mlp.fc1.bias.data, 0.0)
    return mlp.fc2.weight.data @ hidden + mlp.fc2.bias.data


class TestConfigs:
    def test_presets_cover_the_flag_grid(self):
        assert AblationFlags.preset('opt-a') == AblationFlags(False, False, False, False, False)
        assert AblationFlags.preset('FULL') == AblationFlags()
        assert AblationFlags.preset('opt-d+ssa+flow') == AblationFlags(True, True, False, True, True)

    def test_flow_needs_an_attention_block(self):
        with pytest.raises(UsageError):
            AblationFlags(sca=False, ssa=False, flow=True)

    def test_unknown_preset(self):
        with pytest.raises(UsageError):
            AblationFlags.preset('opt-z')

    def test_encoder_validation_and_resnet18_sizes(self):
        with pytest.raises(UsageError):
            EncoderConfig(stage_channels=(8, 4))
        cfg = EncoderConfig.resnet18()
        assert cfg.stage_sizes(256) == [64, 32, 16, 8]
        assert EncoderConfig().stage_sizes(64) == [32, 16, 8, 4]

    def test_decoder_validation(self):
        with pytest.raises(UsageError):
            DecoderConfig(flow_init='random')
        assert DecoderConfig().hidden_width(16) == 8
        assert DecoderConfig().hidden_width(256) == 64


class TestForward:
    def test_output_shapes(self, tiny_model, image_pair):
        model = tiny_model()
        t1, t2 = image_pair(n=2)
        out = model(t1, t2)
        assert out.final_logits.shape == (2, 1, 16, 16)
        assert [a.shape for a in out.aux_logits] == [(2, 1, 4, 4), (2, 1, 8, 8)]
        assert out.deepest[0].shape == (2, 8, 4, 4)
        assert len(out.attention.stages) == 2

    def test_indivisible_input_rejected(self, tiny_model, image_pair):
        t1, t2 = image_pair(n=1, size=12)
        with pytest.raises(DimensionError):
            tiny_model()(t1, t2)

    def test_mismatched_pair_rejected(self, tiny_model, image_pair):
        t1, _ = image_pair(n=1)
        t2, _ = image_pair(n=2)
        with pytest.raises(DimensionError):
            tiny_model()(t1, t2)

    def test_attention_ranges(self, tiny_model, rng):
        model = tiny_model(dtype=np.float32).eval()
        with no_grad():
            for _ in range(50):
                t1 = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
                t2 = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
                for stage in model(t1, t2).attention.stages:
                    for m in (stage.dsa, stage.a_c, stage.a_s):
                        assert m.data.min() > 0.0 and m.data.max() < 1.0
                    assert stage.sim.data.min() >= -1.0 and stage.sim.data.max() <= 1.0

    def test_swapping_time_points_keeps_similarity(self, tiny_model, image_pair):
        model = tiny_model().eval()
        t1, t2 = image_pair(n=1)
        with no_grad():
            a, b = model(t1, t2), model(t2, t1)
        for sa, sb in zip(a.attention.stages, b.attention.stages):
            np.testing.assert_array_equal(sa.sim.data, sb.sim.data)

    def test_without_flow_previous_attention_is_ignored(self, tiny_model, image_pair, rng):
        model = tiny_model(AblationFlags.preset('opt-d+sca+ssa')).eval()
        t1, t2 = image_pair(n=1)
        with no_grad():
            pyr1, pyr2 = model.encode(t1, t2)
            f_prev = Tensor(rng.standard_normal((1, 8, 8, 8)))
            base = model.decode_stage(1, pyr1, pyr2, f_prev, None, None)
            other = model.decode_stage(1, pyr1, pyr2, f_prev, Tensor(rng.random((1, 1, 8, 8))),
                                       Tensor(rng.random((1, 1, 8, 8))))
        for key in ('sim', 'dsa', 'a_c', 'a_s'):
            np.testing.assert_array_equal(getattr(base.attention, key).data, getattr(other.attention, key).data)
        np.testing.assert_array_equal(base.features.data, other.features.data)

    def test_with_flow_previous_attention_matters(self, tiny_model, image_pair, rng):
        model = tiny_model().eval()
        t1, t2 = image_pair(n=1)
        with no_grad():
            pyr1, pyr2 = model.encode(t1, t2)
            f_prev = Tensor(rng.standard_normal((1, 8, 8, 8)))
            half = Tensor(np.full((1, 1, 8, 8), 0.5))
            base = model.decode_stage(1, pyr1, pyr2, f_prev, half, half)
            other = model.decode_stage(1, pyr1, pyr2, f_prev, Tensor(rng.random((1, 1, 8, 8))), half)
        assert not np.array_equal(base.attention.dsa.data, other.attention.dsa.data)

    def test_disabled_attention_blocks(self, tiny_model, image_pair):
        model = tiny_model(AblationFlags.preset('opt-b'))
        t1, t2 = image_pair(n=1)
        out = model(t1, t2)
        assert out.aux_logits == []
        stage = out.attention.stages[0]
        assert stage.dsa is None and stage.a_c is None and stage.a_s is None
        assert stage.sim.shape == (1, 1, 4, 4)

    def test_omitted_flow_init(self, tiny_model, image_pair):
        model = tiny_model(decoder=DecoderConfig(flow_init='omit'))
        assert model.decoder[0].sca.dsa_conv.weight.shape[1] == 1
        assert model.decoder[1].sca.dsa_conv.weight.shape[1] == 2
        t1, t2 = image_pair(n=1)
        assert model(t1, t2).final_logits.shape == (1, 1, 16, 16)

    def test_raw_channel_attention_input(self, tiny_model, image_pair):
        t1, t2 = image_pair(n=1)
        weighted = tiny_model().eval()
        raw = tiny_model(decoder=DecoderConfig(channel_attention_input='raw')).eval()
        with no_grad():
            a, b = weighted(t1, t2), raw(t1, t2)
        assert not np.array_equal(a.final_logits.data, b.final_logits.data)

    def test_every_parameter_receives_a_gradient(self, tiny_model, image_pair, rng):
        model = tiny_model()
        t1, t2 = image_pair(n=2)
        y = (rng.random((2, 1, 16, 16)) > 0.7).astype(np.float64)
        with Tape() as tape:
            out = model(t1, t2)
            loss = total_loss(out.final_logits, out.aux_logits, out.deepest, y, model.flags).total
        backward(loss, tape)
        missing = [name for name, p in model.named_parameters() if p.grad is None]
        assert missing == []

    def test_total_loss_matches_finite_differences(self, tiny_model, image_pair, rng):
        model = tiny_model().eval()
        t1, t2 = image_pair(n=1)
        y = np.zeros((1, 1, 16, 16))
        y[..., 4:10, 5:12] = 1.0
        params = list(model.parameters().values())
        chosen = rng.choice([i for i, p in enumerate(params) if p.size >= 2], size=25, replace=False)

        def loss_fn(*_):
            out = model(t1, t2)
            return total_loss(out.final_logits, out.aux_logits, out.deepest, y, model.flags).total

        report = finite_difference_check(loss_fn, params, probes=2, check=chosen.tolist(), tol=1e-3)
        assert len(report.probes) == 50
        assert report.passed, report.failures()

    def test_encoder_is_shared_across_time_points(self, tiny_model, image_pair):
        model = tiny_model().eval()
        a, b = image_pair(n=1)
        with no_grad():
            ab, ba = model.encode(a, b), model.encode(b, a)
        for i in range(len(ab[0].stages)):
            np.testing.assert_array_equal(ab[0].stages[i].data, ba[1].stages[i].data)
            np.testing.assert_array_equal(ab[1].stages[i].data, ba[0].stages[i].data)

    @pytest.mark.slow
    def test_resnet18_shapes(self, image_pair):
        model = SaanModel(EncoderConfig.resnet18(), seed=0, dtype=np.float32)
        t1, t2 = image_pair(n=1, size=32, dtype=np.float32)
        with no_grad():
            out = model(t1, t2)
        assert out.final_logits.shape == (1, 1, 32, 32)
        assert out.deepest[0].shape == (1, 512, 1, 1)


class TestAttentionBlocks:
    def test_sca_gradients(self, rng):
        params = SimilarityChannelAttention(8, 2, 8, np.random.default_rng(0), np.float64)
        inputs = [Tensor(rng.standard_normal((2, 3, 4, 4))), Tensor(rng.standard_normal((2, 3, 4, 4))),
                  Tensor(rng.standard_normal((2, 2, 4, 4))), Tensor(rng.random((2, 1, 4, 4))),
                  params.dsa_conv.weight]
        report = finite_difference_check(
            lambda f1, f2, fp, dsa, w: sca_block(f1, f2, fp, dsa, params).attended, inputs)
        assert report.passed, report.max_rel_error

    def test_sca_disabled_returns_concatenation(self, rng):
        f1, f2 = Tensor(rng.standard_normal((1, 3, 2, 2))), Tensor(rng.standard_normal((1, 3, 2, 2)))
        out = sca_block(f1, f2, None, None, None)
        np.testing.assert_array_equal(out.attended.data, np.concatenate([f1.data, f2.data], axis=1))
        assert out.dsa is None

    def test_ssa_gradients(self, rng):
        params = SimilaritySpatialAttention(4, np.random.default_rng(0), np.float64)
        inputs = [Tensor(rng.standard_normal((2, 5, 4, 4))), Tensor(rng.random((2, 1, 4, 4))),
                  Tensor(rng.random((2, 1, 4, 4))), params.conv.weight]
        report = finite_difference_check(lambda f, a, g, w: ssa_block(f, a, g, params)[0], inputs)
        assert report.passed, report.max_rel_error

    def test_sca_matches_pixel_loop(self, rng):
        params = SimilarityChannelAttention(4, 2, 2, np.random.default_rng(0), np.float64)
        params.dsa_conv.bias.data[...] = 0.3
        for fc in (params.mlp.fc1, params.mlp.fc2):
            fc.bias.data[...] = rng.standard_normal(fc.bias.shape)
        f1, f2 = rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((1, 2, 2, 2))
        dsa_prev = rng.random((1, 1, 2, 2))
        out = sca_block(Tensor(f1), Tensor(f2), None, Tensor(dsa_prev), params)

        sim = np.zeros((2, 2))
        for py in range(2):
            for px in range(2):
                v1, v2 = f1[0, :, py, px], f2[0, :, py, px]
                cos = v1 @ v2 / (max(np.linalg.norm(v1), 1e-6) * max(np.linalg.norm(v2), 1e-6))
                sim[py, px] = min(max(cos, -1.0), 1.0)
        dsa = sigmoid_np(conv7x7_loop(np.stack([sim, dsa_prev[0, 0]]), params.dsa_conv))
        weighted = np.concatenate([f1[0], f2[0]]) * dsa
        a_c = sigmoid_np(mlp_loop(weighted.mean(axis=(1, 2)), params.mlp)
                         + mlp_loop(weighted.max(axis=(1, 2)), params.mlp))

        np.testing.assert_allclose(out.sim.data[0, 0], sim, atol=1e-12)
        np.testing.assert_allclose(out.dsa.data[0, 0], dsa, atol=1e-12)
        np.testing.assert_allclose(out.a_c.data.reshape(-1), a_c, atol=1e-12)
        np.testing.assert_allclose(out.attended.data[0], weighted * a_c[:, None, None], atol=1e-12)

    def test_ssa_matches_pixel_loop(self, rng):
        params = SimilaritySpatialAttention(4, np.random.default_rng(0), np.float64)
        params.conv.bias.data[...] = -0.2
        f = rng.standard_normal((1, 3, 2, 2))
        a_prev, guidance = rng.random((1, 1, 2, 2)), rng.random((1, 1, 2, 2))
        out, a_s = ssa_block(Tensor(f), Tensor(a_prev), Tensor(guidance), params)

        parts = np.stack([f[0].mean(axis=0), f[0].max(axis=0), a_prev[0, 0], guidance[0, 0]])
        expected = sigmoid_np(conv7x7_loop(parts, params.conv))
        np.testing.assert_allclose(a_s.data[0, 0], expected, atol=1e-12)
        np.testing.assert_allclose(out.data[0], f[0] * expected, atol=1e-12)

    def test_ssa_with_zero_weights_is_half(self, rng):
        params = SimilaritySpatialAttention(4, np.random.default_rng(0), np.float64)
        params.conv.weight.data[...] = 0.0
        f = Tensor(rng.standard_normal((1, 3, 4, 4)))
        out, a_s = ssa_block(f, Tensor(rng.random((1, 1, 4, 4))), Tensor(rng.random((1, 1, 4, 4))), params)
        np.testing.assert_array_equal(a_s.data, np.full((1, 1, 4, 4), 0.5))
        np.testing.assert_array_equal(out.data, 0.5 * f.data)


class TestAccounting:
    def test_totals_are_consistent(self, tiny_model):
        model = tiny_model()
        counts = param_count(model)
        assert counts['total'] == sum(p.size for _, p in model.named_parameters())
        assert counts['total'] == sum(v for k, v in counts.items() if k != 'total')

    def test_attention_increments(self, tiny_model):
        def total(preset, **kw):
            return param_count(tiny_model(AblationFlags.preset(preset), **kw))['total']

        base = total('opt-d')
        d_sca = total('opt-d+sca') - base
        d_ssa = total('opt-d+ssa') - base
        d_flow = total('full') - total('opt-d+sca+ssa')
        assert d_sca > d_ssa > 0 and d_flow > 0
        # one 7x7 conv over [mean, max, guidance] per stage
        assert d_ssa == 2 * (49 * 3 + 1)
        # one extra input channel for each 7x7 attention conv of every stage
        assert d_flow == 2 * 2 * 49
        omit = DecoderConfig(flow_init='omit')
        assert total('full', decoder=omit) - total('opt-d+sca+ssa', decoder=omit) == 2 * 49

    def test_aux_heads_only_with_deep_supervision(self, tiny_model):
        assert param_count(tiny_model(AblationFlags.preset('opt-b')))['aux_heads'] == 0
        assert param_count(tiny_model(AblationFlags.preset('opt-c')))['aux_heads'] == (8 + 1) + (4 + 1)

    def test_profile_cost(self, tiny_model):
        model = tiny_model(dtype=np.float32)
        cost = profile_cost(model, image_size=16, repeats=1)
        assert cost.params == param_count(model)['total']
        assert cost.flops > 0
        assert profile_cost(model, image_size=16, repeats=1).flops == cost.flops
        assert model.training


class TestPrediction:
    def test_probabilities_and_batch_invariance(self, tiny_model, image_pair):
        model = tiny_model()
        t1, t2 = image_pair(n=2)
        both = predict_proba(model, t1.data, t2.data)
        first = predict_proba(model, t1.data[:1], t2.data[:1])
        assert both.shape == (2, 1, 16, 16)
        assert both.min() > 0 and both.max() < 1
        np.testing.assert_allclose(both[:1], first, atol=1e-12)


class TestAttentionExport:
    def test_constant_maps_round_trip(self, tmp_path):
        stage = StageAttention(sim=Tensor(np.full((1, 1, 4, 4), -1.0)), dsa=Tensor(np.full((1, 1, 4, 4), 0.5)))
        files = export_attention_maps(AttentionState([stage]), str(tmp_path))
        assert sorted(os.path.basename(f) for f in files) == [
            'attention_manifest.txt', 'stage0_dsa.pgm', 'stage0_sim.pgm']
        lines = (tmp_path / 'attention_manifest.txt').read_text().splitlines()
        assert lines[0] == 'stage=0 kind=sim min=-1.0 max=1.0 file=stage0_sim.pgm'
        assert lines[1] == 'stage=0 kind=dsa min=0.0 max=1.0 file=stage0_dsa.pgm'
        raw = (tmp_path / 'stage0_dsa.pgm').read_bytes()
        assert raw.endswith(bytes([128]) * 16)
        dsa = read_image(str(tmp_path / 'stage0_dsa.pgm'))
        assert np.abs(dsa - 0.5).max() <= 1 / 255
        np.testing.assert_array_equal(read_image(str(tmp_path / 'stage0_sim.pgm')), 0.0)

    def test_full_model_export(self, tiny_model, image_pair, tmp_path):
        model = tiny_model()
        t1, t2 = image_pair(n=1)
        with no_grad():
            out = model(t1, t2)
        files = export_attention_maps(out.attention, str(tmp_path))
        assert len(files) == 2 * 3 + 1
        text = (tmp_path / 'attention_manifest.txt').read_text()
        for line, f in zip(text.splitlines(), files):
            fields = dict(tok.split('=', 1) for tok in line.split())
            lo, hi = float(fields['min']), float(fields['max'])
            assert fields['file'] == os.path.basename(f)
            stage = out.attention.stages[int(fields['stage'])]
            value = {'sim': stage.sim, 'dsa': stage.dsa, 'as': stage.a_s}[fields['kind']].data[0]
            decoded = lo + (hi - lo) * read_image(f)
            assert np.abs(decoded - value).max() <= (hi - lo) / 255
