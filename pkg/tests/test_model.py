import json
import math

import numpy as np
import pytest

from gradcheck import REL_TOL, check_gradients
from vismae.errors import ConfigError, ContractError, FreezeViolation, ValidationError
from vismae.model import (
    BUFFERS,
    EncoderConfig,
    SepsisModel,
    checkpoint_text,
    classify_head,
    decoder_forward,
    embed_tokens,
    encoder_forward,
    init_params,
    load_checkpoint,
    make_mask,
    n_masked,
    parameter_shapes,
    positional_encoding,
    regress_head,
    save_checkpoint,
)
from vismae.numerics import Tensor, mse, no_grad, weighted_cross_entropy

SMALL = EncoderConfig(d_model=8, ffn_dim=16, n_heads=2, head_hidden=8)


def batch(b, cfg=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, cfg.seq_len, cfg.n_features)), rng.normal(size=(b, cfg.static_full_dim))


@pytest.fixture(scope="module")
def small_model():
    return SepsisModel.initialize(SMALL, seed=1, stage="student")


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"d_model": 10, "n_heads": 4}, {"mask_ratio": 0.0}, {"mask_ratio": 1.0}, {"d_model": 9, "n_heads": 1},
         {"activation": "tanh"}, {"norm_position": "middle"}, {"dropout": 1.0}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            EncoderConfig(**kw)

    def test_round_trip(self):
        assert EncoderConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            EncoderConfig.from_dict({"d_model": 64, "depth": 3})


class TestPositionalEncoding:
    def test_origin(self):
        pe = positional_encoding(48, 64)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)

    def test_range(self):
        pe = positional_encoding(48, 64)
        assert pe.shape == (48, 64)
        assert np.abs(pe).max() <= 1.0

    def test_hand_value(self):
        assert positional_encoding(48, 64)[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
        assert positional_encoding(48, 64)[1, 2] == pytest.approx(math.sin(1.0 / 10000 ** (2 / 64)), abs=1e-15)

    def test_odd_dim(self):
        with pytest.raises(ConfigError):
            positional_encoding(48, 7)


class TestMask:
    def test_default_count(self):
        cfg = EncoderConfig()
        assert n_masked(cfg) == 17
        plan = make_mask(5, cfg, seed=3)
        assert plan.mask.shape == (5, 48, 7)
        np.testing.assert_array_equal(plan.mask.sum(axis=(1, 2)), 17)

    def test_deterministic(self):
        a = make_mask(4, EncoderConfig(), seed=7)
        b = make_mask(4, EncoderConfig(), seed=7)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_sample_depends_on_index_only(self):
        full = make_mask(6, EncoderConfig(), seed=2)
        tail = make_mask(2, EncoderConfig(), seed=2, start_index=4)
        np.testing.assert_array_equal(full.mask[4:], tail.mask)

    def test_minimum_one_cell(self):
        cfg = EncoderConfig(mask_ratio=1 / 336)
        assert make_mask(3, cfg, 0).mask.sum(axis=(1, 2)).tolist() == [1, 1, 1]

    def test_zero_cells_rejected(self):
        # too small to select any cell after rounding
        with pytest.raises(ConfigError):
            n_masked(EncoderConfig(mask_ratio=1e-12))

    def test_timestep_granularity(self):
        cfg = EncoderConfig(mask_granularity="timestep")
        m = make_mask(2, cfg, 0).mask
        rows = m.any(axis=2)
        assert rows.sum(axis=1).tolist() == [3, 3]
        np.testing.assert_array_equal(m[rows], True)


class TestParameters:
    def test_shapes_and_names(self):
        params = init_params(EncoderConfig(), 0)
        shapes = parameter_shapes(EncoderConfig())
        assert {k: v.shape for k, v in params.items()} == shapes
        assert shapes["input_proj.weight"] == (7, 64)
        assert shapes["decoder.weight"] == (64, 7)
        assert shapes["cls_head.hidden.weight"] == (115, 64)
        assert shapes["reg_head.hidden.weight"] == (111, 64)
        assert shapes["cls_head.out.weight"] == (64, 2)
        assert shapes["reg_head.out.weight"] == (64, 4)

    def test_subset_init_matches_full(self):
        full = init_params(SMALL, 5)
        heads = init_params(SMALL, 5, ("cls_head.",))
        for k, v in heads.items():
            np.testing.assert_array_equal(v.data, full[k].data)

    def test_buffers_not_trainable(self, small_model):
        assert not (set(small_model.trainable()) & BUFFERS)
        assert not small_model.params["pos_table"].requires_grad


class TestEncoder:
    @pytest.mark.parametrize("b", [1, 2, 64])
    def test_shapes(self, b):
        cfg = EncoderConfig()
        model = SepsisModel.initialize(cfg, 0)
        x, s = batch(b, cfg)
        with no_grad():
            latent = model.encode(x)
            assert latent.shape == (b, 49, 64)
            assert model.reconstruct(latent).shape == (b, 48, 7)
            z, r = model.heads(latent, s)
        assert z.shape == (b, 2) and r.shape == (b, 4)

    def test_eval_deterministic(self, small_model):
        x, _ = batch(3)
        np.testing.assert_array_equal(small_model.encode(x).data, small_model.encode(x).data)

    def test_train_mode_uses_dropout(self, small_model):
        x, _ = batch(3)
        a = small_model.encode(x, train=True, rng=np.random.default_rng(0)).data
        b = small_model.encode(x, train=True, rng=np.random.default_rng(1)).data
        assert not np.array_equal(a, b)

    def test_permutation_equivariance(self):
        cfg = EncoderConfig(d_model=16, ffn_dim=32, n_heads=4, positional_encoding=False)
        params = init_params(cfg, 3)
        x, _ = batch(2, cfg, seed=4)
        perm = np.arange(48)
        perm[[5, 30]] = perm[[30, 5]]
        with no_grad():
            out = encoder_forward(x, None, cfg, params).data
            out_p = encoder_forward(x[:, perm], None, cfg, params).data
        np.testing.assert_allclose(out_p[:, 1:], out[:, 1:][:, perm], atol=1e-12)
        np.testing.assert_allclose(out_p[:, 0], out[:, 0], atol=1e-12)

    def test_masked_cell_causality(self):
        params = init_params(SMALL, 0)
        x, _ = batch(2)
        plan = make_mask(2, SMALL, seed=9)
        t, f = np.argwhere(plan.mask[0])[0]
        x2 = x.copy()
        x2[0, t, f] += 100.0
        with no_grad():
            a = embed_tokens(x, plan, SMALL, params).data
            b = embed_tokens(x2, plan, SMALL, params).data
        np.testing.assert_array_equal(a, b)

    def test_bad_input_shape(self, small_model):
        with pytest.raises(ContractError):
            small_model.encode(np.zeros((2, 47, 7)))


class TestDecoder:
    def test_zero_weights(self):
        params = init_params(SMALL, 0)
        params["decoder.weight"] = Tensor(np.zeros((8, 7)))
        params["decoder.bias"] = Tensor(np.zeros(7))
        latent = Tensor(np.random.default_rng(0).normal(size=(2, 49, 8)))
        np.testing.assert_array_equal(decoder_forward(latent, params).data, 0.0)

    def test_linear(self):
        params = init_params(SMALL, 0)
        params["decoder.bias"] = Tensor(np.zeros(7))
        h = np.random.default_rng(1).normal(size=(2, 49, 8))
        a = decoder_forward(Tensor(2.5 * h), params).data
        b = 2.5 * decoder_forward(Tensor(h), params).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            decoder_forward(Tensor(np.zeros((2, 49, 5))), init_params(SMALL, 0))


class TestHeads:
    def test_regression_ignores_scores(self, small_model):
        x, s = batch(6)
        s2 = s.copy()
        s2[:, 47:] = s[::-1, 47:]
        with no_grad():
            latent = small_model.encode(x)
            r1 = small_model.heads(latent, s)[1].data
            r2 = small_model.heads(latent, s2)[1].data
        np.testing.assert_array_equal(r1, r2)

    def test_head_shape_checks(self, small_model):
        cls = np.zeros((2, 8))
        with pytest.raises(ContractError):
            classify_head(cls, np.zeros((2, 47)), SMALL, small_model.params)
        with pytest.raises(ContractError):
            regress_head(cls, np.zeros((2, 51)), SMALL, small_model.params)

    def test_head_gradients(self, small_model):
        rng = np.random.default_rng(2)
        cls, s = rng.normal(size=(3, 8)), rng.normal(size=(3, 51))
        names = ["cls_head.hidden.weight", "cls_head.hidden.bias", "cls_head.out.weight", "cls_head.out.bias"]

        def build(ts):
            params = dict(small_model.params, **dict(zip(names, ts)))
            z = classify_head(cls, s, SMALL, params)
            return weighted_cross_entropy(z, [0, 1, 1], [0.7, 1.6])

        assert check_gradients(build, [small_model.params[n].data for n in names]) < REL_TOL


class TestFullModelGradient:
    """Finite differences through the whole network at test scale."""

    def test_encoder_decoder_and_heads(self):
        cfg = SMALL
        params = init_params(cfg, 11)
        names = [n for n in params if n not in BUFFERS]
        x, s = batch(2, cfg, seed=12)
        plan = make_mask(2, cfg, seed=13)
        y = np.array([0, 1])
        target = np.random.default_rng(14).normal(size=(2, 4))

        def build(ts):
            p = dict(params, **dict(zip(names, ts)))
            latent = encoder_forward(x, plan, cfg, p)
            rec = decoder_forward(latent, p, cfg)
            cls = latent[:, 0, :]
            z = classify_head(cls, s, cfg, p)
            r = regress_head(cls, s[:, :47], cfg, p)
            return mse(rec, x, plan.mask) + weighted_cross_entropy(z, y, [0.6, 2.0]) + mse(r, target) * 0.1

        assert check_gradients(build, [params[n].data for n in names]) < REL_TOL


class TestModelContainer:
    def test_freeze(self):
        m = SepsisModel.initialize(SMALL, 0, "teacher")
        digest = m.digest()
        m.freeze()
        assert all(not t.requires_grad for t in m.params.values())
        with pytest.raises(ValueError):
            m.params["decoder.bias"].data[0] = 1.0
        m.assert_digest(digest)

    def test_digest_detects_change(self):
        m = SepsisModel.initialize(SMALL, 0, "teacher")
        d = m.digest()
        m.params["decoder.bias"].data = m.params["decoder.bias"].data + 1e-12
        with pytest.raises(FreezeViolation):
            m.assert_digest(d)

    def test_bad_stage(self):
        with pytest.raises(ContractError):
            SepsisModel(SMALL, init_params(SMALL, 0), "critic")

    def test_shape_check(self):
        params = init_params(SMALL, 0)
        params["decoder.bias"] = Tensor(np.zeros(6))
        with pytest.raises(ContractError):
            SepsisModel(SMALL, params)

    def test_predict(self, small_model):
        x, s = batch(5)
        probs, logits, regs = small_model.predict(x, s, batch_size=2)
        assert probs.shape == (5,) and logits.shape == (5, 2) and regs.shape == (5, 4)
        assert ((probs > 0) & (probs < 1)).all()


class TestCheckpoint:
    def test_round_trip_bytes_and_outputs(self, small_model, tmp_path):
        p1 = save_checkpoint(small_model, tmp_path / "a.json", {"seed": 1})
        loaded, meta = load_checkpoint(p1)
        assert meta == {"seed": 1}
        assert loaded.stage == "student" and loaded.config == SMALL
        p2 = save_checkpoint(loaded, tmp_path / "b.json", {"seed": 1})
        assert p1.read_bytes() == p2.read_bytes()
        x, s = batch(4)
        for a, b in zip(small_model.predict(x, s), loaded.predict(x, s)):
            np.testing.assert_array_equal(a, b)

    def test_text_is_json_with_shapes(self, small_model):
        doc = json.loads(checkpoint_text(small_model))
        assert doc["format_version"] == 1
        assert doc["tensors"]["decoder.weight"]["shape"] == [8, 7]

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(ValidationError):
            load_checkpoint(p)
