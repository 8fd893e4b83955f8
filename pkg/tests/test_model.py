import numpy as np
import pytest

from onecross import numerics as nm
from onecross.model import (
    CausalLanguageModel,
    InitError,
    LmConfig,
    ModelConfig,
    ModelParams,
    Recognizer,
    analytic_decoder_delta,
    analytic_total,
    apply_freeze_policy,
    build_decoder,
    full_scale_config,
    init_from_lm,
    load_encoder_group,
    param_count,
)
from onecross.numerics import ShapeError, Tensor
from onecross.training import Adam

CFG = ModelConfig(vocab_size=18)  # 16 chars + SOS/EOS


def feats(t=20, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(t, CFG.d_feat)))


def fresh_lm_state(cfg=CFG, seed=3):
    params = ModelParams(seed)
    CausalLanguageModel(params, LmConfig.matching(cfg))
    return params.state()


class TestForward:
    def test_shape_contract(self):
        model = Recognizer(CFG, seed=1)
        ctc_logits, dec_logits = model.forward(feats(20), [CFG.sos_id, 0, 1, 2, 3])
        assert ctc_logits.shape == (5, 19)
        assert dec_logits.shape == (5, 18)

    def test_deterministic(self):
        model = Recognizer(CFG, seed=2)
        a = model.forward(feats(16), [CFG.sos_id, 4, 5])
        b = model.forward(feats(16), [CFG.sos_id, 4, 5])
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)

    def test_feature_perturbation_reaches_decoder(self):
        model = Recognizer(CFG, seed=3)
        x = feats(16, 5)
        base = model.forward(x, [CFG.sos_id, 1])[1].data
        bumped = Tensor(x.data + 0.1)
        pert = model.forward(bumped, [CFG.sos_id, 1])[1].data
        assert np.max(np.abs(base - pert)) > 0.0

    def test_prefix_must_start_with_sos(self):
        model = Recognizer(CFG, seed=4)
        with pytest.raises(ShapeError, match="start-of-sequence"):
            model.forward(feats(16), [0, 1])

    def test_empty_features_rejected(self):
        model = Recognizer(CFG, seed=5)
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((0, CFG.d_feat))), [CFG.sos_id])

    def test_encoder_output_length_is_ceil(self):
        model = Recognizer(CFG, seed=6)
        for t in (4, 5, 20, 21, 33):
            enc = model.encode(feats(t, t))
            assert enc.shape[0] == -(-t // 4)


class TestDecoderStructure:
    def test_one_cross_decoder_has_exactly_one_cross_block(self):
        params = ModelParams(0)
        build_decoder(params, CFG)
        cross_attn = {p.rsplit(".attn.", 1)[0] for p in params.paths()
                      if p.startswith("decoder.cross.") and ".attn." in p}
        assert len(cross_attn) == 1
        assert not any(".self_attn." in p for p in params.paths())

    def test_two_cross_decoder_has_exactly_two(self):
        params = ModelParams(0)
        build_decoder(params, ModelConfig(vocab_size=18, decoder_kind="twocross"))
        cross_attn = {p.rsplit(".attn.", 1)[0] for p in params.paths()
                      if p.startswith("decoder.cross.") and ".attn." in p}
        assert len(cross_attn) == 2

    def test_vanilla_layers_carry_both_attentions(self):
        params = ModelParams(0)
        build_decoder(params, ModelConfig(vocab_size=18, decoder_kind="vanilla"))
        for i in range(2):
            assert f"decoder.stack.{i}.self_attn.wq" in params
            assert f"decoder.stack.{i}.cross_attn.wq" in params

    def test_causal_lm_prefix_invariance(self):
        params = ModelParams(7)
        lm = CausalLanguageModel(params, LmConfig.matching(CFG))
        with nm.no_grad():
            short = lm([CFG.sos_id, 2, 5]).data
            long = lm([CFG.sos_id, 2, 5, 9, 1]).data
        # identical up to GEMM blocking (reduction order differs across shapes)
        assert np.allclose(short, long[:3], atol=1e-12, rtol=0.0)


class TestInitFromLm:
    def test_copy_contract_bitwise(self):
        model = Recognizer(CFG, seed=8)
        donor = fresh_lm_state()
        init_from_lm(model, donor)
        assert np.array_equal(model.params["decoder.self.0.attn.wq"].data,
                              donor["self.0.attn.wq"])
        assert np.array_equal(model.params["decoder.emb.pos"].data, donor["emb.pos"])
        assert np.array_equal(model.params["decoder.norm.gain"].data, donor["norm.gain"])

    def test_cross_and_output_untouched(self):
        model = Recognizer(CFG, seed=9)
        before_cross = model.params["decoder.cross.0.attn.wq"].data.copy()
        before_out = model.params["decoder.out.w"].data.copy()
        init_from_lm(model, fresh_lm_state())
        assert np.array_equal(model.params["decoder.cross.0.attn.wq"].data, before_cross)
        assert np.array_equal(model.params["decoder.out.w"].data, before_out)

    def test_wrong_width_donor_names_path(self):
        model = Recognizer(CFG, seed=10)
        wrong = ModelConfig(vocab_size=18, d_model=16, d_ff=32, n_heads=4)
        with pytest.raises(InitError, match="decoder.emb.tok"):
            init_from_lm(model, fresh_lm_state(wrong))

    def test_missing_tensor_is_an_error(self):
        model = Recognizer(CFG, seed=11)
        donor = fresh_lm_state()
        del donor["self.1.ffn.w1"]
        with pytest.raises(InitError, match="self.1.ffn.w1"):
            init_from_lm(model, donor)

    def test_idempotent(self):
        model = Recognizer(CFG, seed=12)
        donor = fresh_lm_state()
        init_from_lm(model, donor)
        once = model.params.state()
        init_from_lm(model, donor)
        for path, arr in model.params.state().items():
            assert np.array_equal(arr, once[path]), path

    def test_vanilla_decoder_has_no_donor_group(self):
        model = Recognizer(ModelConfig(vocab_size=18, decoder_kind="vanilla"), seed=13)
        with pytest.raises(InitError):
            init_from_lm(model, fresh_lm_state())

    def test_encoder_group_loads_from_full_checkpoint(self):
        donor_model = Recognizer(CFG, seed=14)
        target = Recognizer(CFG, seed=15)
        load_encoder_group(target, donor_model.params.state())
        assert np.array_equal(target.params["encoder.conv.0.w"].data,
                              donor_model.params["encoder.conv.0.w"].data)
        assert np.array_equal(target.params["encoder.context.1.attn.wq"].data,
                              donor_model.params["encoder.context.1.attn.wq"].data)


class TestFreezePolicy:
    def test_warm_freezes_encoder_context(self):
        model = Recognizer(CFG, seed=16)
        apply_freeze_policy(model.params, "warm")
        assert all(model.params.is_frozen(p) for p in model.params.paths()
                   if p.startswith("encoder.context."))
        assert not model.params.is_frozen("ctc_head.w")
        assert not model.params.is_frozen("decoder.cross.0.attn.wq")
        assert not model.params.is_frozen("decoder.out.w")

    def test_main_keeps_conv_frozen(self):
        model = Recognizer(CFG, seed=17)
        apply_freeze_policy(model.params, "main")
        assert all(model.params.is_frozen(p) for p in model.params.paths()
                   if p.startswith("encoder.conv."))
        assert not model.params.is_frozen("encoder.context.0.attn.wq")

    def test_fixed_policy_keeps_donor_group_frozen_in_main(self):
        model = Recognizer(CFG, seed=18)
        apply_freeze_policy(model.params, "main", "fixed")
        assert model.params.is_frozen("decoder.self.0.attn.wq")
        assert model.params.is_frozen("decoder.emb.tok")
        assert model.params.is_frozen("decoder.norm.gain")

    def test_all_policy_unfreezes_whole_self_stack(self):
        model = Recognizer(CFG, seed=19)
        apply_freeze_policy(model.params, "main", "all")
        frozen_self = [p for p in model.params.paths()
                       if p.startswith("decoder.self.") and model.params.is_frozen(p)]
        assert frozen_self == []
        assert not model.params.is_frozen("decoder.emb.tok")

    def test_lastk_policies_release_trailing_layers(self):
        cfg = ModelConfig(vocab_size=18, dec_layers=4)
        model = Recognizer(cfg, seed=20)
        apply_freeze_policy(model.params, "main", "last1")
        assert not model.params.is_frozen("decoder.self.3.attn.wq")
        assert model.params.is_frozen("decoder.self.2.attn.wq")
        apply_freeze_policy(model.params, "main", "last3")
        assert not model.params.is_frozen("decoder.self.1.attn.wq")
        assert model.params.is_frozen("decoder.self.0.attn.wq")

    def test_unknown_phase_and_policy_rejected(self):
        model = Recognizer(CFG, seed=21)
        with pytest.raises(ValueError):
            apply_freeze_policy(model.params, "cooldown")
        with pytest.raises(ValueError):
            apply_freeze_policy(model.params, "main", "half")

    def test_frozen_params_bitwise_unchanged_by_adam(self):
        model = Recognizer(CFG, seed=22)
        apply_freeze_policy(model.params, "warm")
        frozen_before = {p: t.data.copy() for p, t in model.params.items()
                         if model.params.is_frozen(p)}
        opt = Adam(model.params)
        for step in range(3):
            model.params.zero_grad()
            ctc_logits, dec_logits = model.forward(feats(16, step), [CFG.sos_id, 1, 2])
            nm.mean_all(nm.add(nm.mean_all(ctc_logits), nm.mean_all(dec_logits))).backward()
            opt.step(1e-2)
        for path, before in frozen_before.items():
            assert np.array_equal(model.params[path].data, before), path
        # and something trainable actually moved
        assert not np.array_equal(model.params["ctc_head.w"].data.copy(),
                                  Recognizer(CFG, seed=22).params["ctc_head.w"].data)


class TestParamCount:
    def test_ocd6_smaller_than_vanilla6_with_exact_delta(self):
        c_one = ModelConfig(vocab_size=18, dec_layers=6, decoder_kind="onecross")
        c_van = ModelConfig(vocab_size=18, dec_layers=6, decoder_kind="vanilla")
        p_one, p_van = ModelParams(0), ModelParams(0)
        build_decoder(p_one, c_one)
        build_decoder(p_van, c_van)
        n_one = param_count(p_one, "decoder")
        n_van = param_count(p_van, "decoder")
        assert n_one < n_van
        assert n_van - n_one == analytic_decoder_delta(c_one)

    def test_ctc_head_example(self):
        from onecross.model import CtcHead

        params = ModelParams(0)
        CtcHead(params, ModelConfig(vocab_size=18, d_model=32))
        assert param_count(params, "ctc_head") == 32 * 19 + 19 == 627

    def test_full_scale_ordering(self):
        assert analytic_total(full_scale_config("onecross")) < analytic_total(
            full_scale_config("vanilla"))

    def test_brute_force_matches_analytic_total(self):
        for kind in ("onecross", "twocross", "vanilla"):
            cfg = ModelConfig(vocab_size=18, decoder_kind=kind, dec_layers=3)
            model = Recognizer(cfg, seed=0)
            assert param_count(model.params) == analytic_total(cfg), kind

    def test_unmatched_selector_rejected(self):
        model = Recognizer(CFG, seed=23)
        with pytest.raises(KeyError):
            param_count(model.params, "nonexistent.")
