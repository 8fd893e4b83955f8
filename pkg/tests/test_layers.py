import numpy as np
import pytest

from onecross import numerics as nm
from onecross.diagnostics import gradient_suite
from onecross.layers import (
    AttentionBlock,
    AttentionConfig,
    CrossLayer,
    EncoderLayer,
    SelfLayer,
    VanillaDecoderLayer,
    attention_param_count,
    multi_head_attention,
    positional_encoding,
    self_layer_param_count,
    sinusoidal_positions,
    vanilla_layer_param_count,
)
from onecross.model import ModelParams
from onecross.numerics import ShapeError, Tensor

CFG = AttentionConfig(d_model=16, n_heads=4, d_ff=24)


def rand(shape, seed=0, std=1.0):
    return np.random.default_rng(seed).normal(0.0, std, size=shape)


def make_block(seed=0, cfg=CFG):
    return AttentionBlock(ModelParams(seed), "attn", cfg)


class TestMultiHeadAttention:
    def test_identical_value_rows_give_projected_value(self):
        block = make_block(1)
        v0 = rand(CFG.d_model, 2)
        q = Tensor(rand((5, CFG.d_model), 3))
        kv = Tensor(np.tile(v0, (7, 1)))
        out = multi_head_attention(block, q, kv, kv, None)
        # any convex combination of identical per-head values is that value
        projected_v = v0 @ block.wv.data + block.bv.data
        expect = projected_v @ block.wo.data + block.bo.data
        assert np.allclose(out.data, np.tile(expect, (5, 1)), atol=1e-10)

    def test_causal_mask_is_bitwise(self):
        block = make_block(2)
        x = rand((6, CFG.d_model), 4)
        base = multi_head_attention(block, Tensor(x), Tensor(x), Tensor(x), "causal").data
        x2 = x.copy()
        x2[4] += 10.0  # perturb position 4; outputs at positions <= 3 must not move
        pert = multi_head_attention(block, Tensor(x2), Tensor(x2), Tensor(x2), "causal").data
        assert np.array_equal(base[:4], pert[:4])
        assert not np.allclose(base[4:], pert[4:])

    def test_sharpened_logit_saturates_to_one_value(self):
        d = 4
        cfg = AttentionConfig(d, 1, 8)
        params = ModelParams(0)
        block = AttentionBlock(params, "a", cfg)
        for w in (block.wq, block.wk, block.wv, block.wo):
            w.data = np.eye(d)
        k = Tensor(rand((6, d), 5))
        v = Tensor(rand((6, d), 6))
        # query aligned with key 3, scaled so its logit clears the rest by >> 20
        q = Tensor(np.tile(k.data[3] * 40.0 / np.dot(k.data[3], k.data[3]) * 2.0, (1, 1)))
        out = multi_head_attention(block, q, k, v, None)
        assert np.allclose(out.data[0], v.data[3], atol=1e-6)

    def test_head_divisibility_checked(self):
        with pytest.raises(ShapeError):
            AttentionConfig(d_model=10, n_heads=4, d_ff=8)

    def test_mask_kind_checked(self):
        block = make_block(3)
        x = Tensor(rand((3, CFG.d_model), 7))
        with pytest.raises(ShapeError):
            multi_head_attention(block, x, x, x, "banded")


class TestSpecies:
    def test_self_layer_shape_preserved(self):
        params = ModelParams(0)
        layer = SelfLayer(params, "l", CFG)
        for L in (1, 7):
            x = Tensor(rand((L, CFG.d_model), L))
            assert layer(x).shape == (L, CFG.d_model)

    def test_cross_layer_output_length_tracks_decoder_stream(self):
        params = ModelParams(1)
        layer = CrossLayer(params, "l", CFG)
        for te in (2, 9):
            out = layer(Tensor(rand((4, CFG.d_model), te)), Tensor(rand((te, CFG.d_model), 5 + te)))
            assert out.shape == (4, CFG.d_model)

    def test_causality_exact_zero_gradients(self):
        params = ModelParams(2)
        for cls, needs_enc in ((SelfLayer, False), (VanillaDecoderLayer, True)):
            layer = cls(params, cls.__name__, CFG)
            x = Tensor(rand((5, CFG.d_model), 8), requires_grad=True)
            enc = Tensor(rand((3, CFG.d_model), 9))
            out = layer(x, enc) if needs_enc else layer(x)
            nm.sum_all(nm.mul(out, Tensor(_row_mask(5, 2, CFG.d_model)))).backward()
            # loss reads rows <= 2 only; gradient on rows > 2 must vanish exactly
            assert np.all(x.grad[3:] == 0.0), cls.__name__
            assert np.any(x.grad[:3] != 0.0)

    def test_encoder_layer_is_bidirectional(self):
        params = ModelParams(3)
        layer = EncoderLayer(params, "l", CFG)
        x = Tensor(rand((5, CFG.d_model), 10), requires_grad=True)
        nm.sum_all(nm.mul(layer(x), Tensor(_row_mask(5, 0, CFG.d_model)))).backward()
        # reading only row 0 still reaches every input row
        assert np.all(np.any(x.grad != 0.0, axis=1))

    def test_cross_layer_constant_encoder_rows_decouple_queries(self):
        params = ModelParams(4)
        layer = CrossLayer(params, "l", CFG)
        x = Tensor(rand((4, CFG.d_model), 11), requires_grad=True)
        enc = Tensor(np.tile(rand(CFG.d_model, 12), (6, 1)))
        nm.sum_all(layer(x, enc)).backward()
        # with identical value rows the attention output is constant w.r.t. the
        # queries, so the query projection receives (numerically) no gradient
        assert np.max(np.abs(layer.attn.wq.grad)) < 1e-12
        assert np.max(np.abs(layer.attn.wk.grad)) < 1e-12

    def test_species_pass_grad_check(self):
        for name, report in gradient_suite(d_model=8, n_heads=2, d_ff=12, seed=3):
            assert report.passed, f"{name}: {report}"


def _row_mask(n_rows, keep_upto, d):
    m = np.zeros((n_rows, d))
    m[: keep_upto + 1] = 1.0
    return m


class TestParamAccounting:
    def test_vanilla_exceeds_self_by_exactly_one_attention_block(self):
        ps, pv = ModelParams(0), ModelParams(0)
        SelfLayer(ps, "l", CFG)
        VanillaDecoderLayer(pv, "l", CFG)
        delta = pv.param_count() - ps.param_count()
        assert delta == attention_param_count(CFG)
        assert delta == 4 * CFG.d_model**2 + 4 * CFG.d_model

    def test_analytic_formulas_match_registry(self):
        for cls, formula in ((SelfLayer, self_layer_param_count),
                             (VanillaDecoderLayer, vanilla_layer_param_count),
                             (CrossLayer, self_layer_param_count),
                             (EncoderLayer, self_layer_param_count)):
            params = ModelParams(0)
            cls(params, "l", CFG)
            assert params.param_count() == formula(CFG), cls.__name__


class TestPositions:
    def test_sinusoidal_row_zero_alternates(self):
        table = sinusoidal_positions(3, 8)
        assert np.array_equal(table[0], np.array([0.0, 1.0] * 4))

    def test_sinusoidal_bounded(self):
        table = sinusoidal_positions(50, 16)
        assert np.all(table >= -1.0) and np.all(table <= 1.0)

    def test_learned_rows_come_from_table(self):
        params = ModelParams(5)
        table = params.tensor("pos", (10, 6), ("normal", 0.5))
        out = positional_encoding(4, 6, "learned", 10, table)
        assert np.array_equal(out.data, table.data[:4])

    def test_length_over_maximum_rejected(self):
        with pytest.raises(ShapeError):
            positional_encoding(11, 6, "sinusoidal", 10)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(4, 6, "rotary", 10)
