import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import core.tensor_handler as T
from core.model_handler import (ConvBlockSpec, HybridClassifier, MLPClassifier, ModelParams, ModelSpec,
                                ModelSpecError, attention_block, bilstm_forward, build, count_parameters,
                                infer_seq_reshape, is_valid_model_spec, make_classifier, multi_head_attention,
                                residual_block, standard_spec)
from core.tensor_handler import Tensor, finite_diff_check
from core.train_handler import mlp_baseline_spec

SMALL = ModelSpec(input_dim=24, conv_blocks=(ConvBlockSpec(4, 3), ConvBlockSpec(6, 3, residual=True)),
                  lstm_hidden=4, lstm_layers=1, heads_stage1=2, heads_stage2=2, dense_sizes=(8,), dropout=0.3)


def dense_count(n_in, n_out):
    return n_in * n_out + n_out


class TestSpec:
    @pytest.mark.parametrize("d, expected", [(988, (76, 13)), (120, (15, 8)), (32, (4, 8)), (24, (3, 8))])
    def test_reshape_rule(self, d, expected):
        assert infer_seq_reshape(d) == expected

    def test_default_parameter_count(self):
        """The full-size enhanced model on 988 features."""
        assert count_parameters(build(ModelSpec(), seed=0)) == 1_698_563

    def test_mlp_parameter_count(self):
        params = MLPClassifier(mlp_baseline_spec(988), seed=0).params
        expected = dense_count(988, 256) + dense_count(256, 128) + dense_count(128, 3)
        assert count_parameters(params) == expected == 286_467

    def test_heads_must_divide_width(self):
        ok, msg = is_valid_model_spec(ModelSpec(lstm_hidden=25))
        assert not ok
        assert "heads_stage1=16 does not divide the attended width 50" in msg
        with pytest.raises(ModelSpecError, match="does not divide"):
            build(ModelSpec(lstm_hidden=25), seed=0)

    def test_reshape_too_small(self):
        ok, msg = is_valid_model_spec(ModelSpec(input_dim=100, seq_reshape=(9, 11)))
        assert not ok
        assert "cannot hold" in msg

    def test_standard_variant(self):
        plain = standard_spec(ModelSpec())
        assert plain.heads_stage1 is None
        assert plain.lstm_layers == 1
        assert not any(b.residual for b in plain.conv_blocks)
        names = build(plain, seed=0).names()
        assert not any(n.startswith("attn1.") for n in names)
        assert not any(".proj." in n for n in names)

    def test_parameter_names(self):
        names = build(SMALL, seed=0).names()
        for expected in ("conv0.weight", "conv1.proj.weight", "lstm0.fwd.w_xh", "lstm0.bwd.w_hh", "lstm0.fwd.b",
                         "attn1.q.weight", "attn2.ln.gain", "dense0.bias", "out.weight"):
            assert expected in names

    def test_forget_gate_bias(self):
        b = build(SMALL, seed=0)["lstm0.fwd.b"].data
        h = SMALL.lstm_hidden
        assert_allclose(b[h:2 * h], 1.0)
        assert_allclose(np.delete(b, np.arange(h, 2 * h)), 0.0)

    def test_unknown_kind(self):
        with pytest.raises(ModelSpecError, match="unknown neural model kind"):
            make_classifier("cnn", SMALL, seed=0)


class TestLayers:
    def test_residual_block_identity_with_zero_weights(self, rng):
        params = ModelParams({"c.weight": Tensor(np.zeros((3, 3, 3))), "c.bias": Tensor(np.zeros(3))})
        x = Tensor(rng.normal(size=(2, 3, 7)))
        out = residual_block(x, params, "c", ConvBlockSpec(3, 3, residual=True))
        assert_allclose(out.data, x.data)

    def test_attention_rows_sum_to_one(self, rng):
        params = build(SMALL, seed=1)
        x = Tensor(rng.normal(size=(3, 5, 8)))
        out, weights = multi_head_attention(x, 2, params, "attn2")
        assert out.shape == (3, 5, 8)
        assert weights.shape == (3, 2, 5, 5)
        assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_attention_block_output_is_normalized(self, rng):
        params = build(SMALL, seed=1)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        out, _ = attention_block(x, 2, params, "attn1")
        assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)

    def test_heads_not_dividing_width(self, rng):
        params = build(SMALL, seed=1)
        with pytest.raises(ModelSpecError, match="3 heads do not divide width 8"):
            multi_head_attention(Tensor(rng.normal(size=(1, 4, 8))), 3, params, "attn2")


def lstm_params(rng, n_in, hidden, mirrored=False, scale=0.5):
    """One BiLSTM layer 'l'; mirrored gives both directions the same weights."""
    arrays = {}
    for direction in ("fwd", "bwd"):
        if direction == "bwd" and mirrored:
            arrays.update({k.replace("fwd", "bwd"): v.copy() for k, v in arrays.items()})
            continue
        arrays[f"l.{direction}.w_xh"] = scale * rng.normal(size=(n_in, 4 * hidden))
        arrays[f"l.{direction}.w_hh"] = scale * rng.normal(size=(hidden, 4 * hidden))
        arrays[f"l.{direction}.b"] = scale * rng.normal(size=4 * hidden)
    return ModelParams({k: Tensor(v) for k, v in arrays.items()})


class TestSequenceLayers:
    def test_bilstm_zero_weights_give_zero_states(self, rng):
        params = lstm_params(rng, 3, 4, scale=0.0)
        out = bilstm_forward(Tensor(rng.normal(size=(2, 5, 3))), params, "l")
        assert out.shape == (2, 5, 8)
        assert_array_equal(out.data, 0.0)

    def test_bilstm_reversal_swaps_directions(self, rng):
        hidden = 3
        params = lstm_params(rng, 2, hidden, mirrored=True)
        seq = rng.normal(size=(6, 2))
        out = bilstm_forward(Tensor(seq), params, "l").data
        flipped = bilstm_forward(Tensor(seq[::-1].copy()), params, "l").data
        assert out.shape == (6, 2 * hidden)
        assert_allclose(flipped[:, :hidden], out[::-1, hidden:], atol=1e-12)
        assert_allclose(flipped[:, hidden:], out[::-1, :hidden], atol=1e-12)

    def test_bilstm_gradients(self, rng):
        """Two timesteps, H=3."""
        params = lstm_params(rng, 2, 3)
        seq = Tensor(rng.normal(size=(1, 2, 2)), requires_grad=True)
        weights = rng.normal(size=(1, 2, 6))
        report = finite_diff_check(lambda: T.sum(T.mul(bilstm_forward(seq, params, "l"), weights)),
                                   [seq] + params.values())
        assert report.checked > 0
        assert report.max_rel_err < 1e-4

    def test_zero_query_gives_uniform_attention(self, rng):
        params = build(SMALL, seed=1)
        params["attn2.q.weight"].data[:] = 0.0
        params["attn2.q.bias"].data[:] = 0.0
        _, weights = multi_head_attention(Tensor(rng.normal(size=(2, 5, 8))), 2, params, "attn2")
        assert_allclose(weights, 1.0 / 5, atol=1e-15)

    def test_single_step_attention_is_value_projection(self, rng):
        params = build(SMALL, seed=1)
        x = rng.normal(size=(1, 8))
        out, weights = multi_head_attention(Tensor(x), 2, params, "attn2")
        value = x @ params["attn2.v.weight"].data + params["attn2.v.bias"].data
        expected = value @ params["attn2.o.weight"].data + params["attn2.o.bias"].data
        assert_allclose(weights, 1.0)
        assert_allclose(out.data, expected, atol=1e-12)


class TestClassifier:
    def test_probabilities(self, rng):
        model = HybridClassifier(SMALL, seed=0)
        probs = model.predict_proba(rng.normal(size=(7, 24)))
        assert probs.shape == (7, 3)
        assert np.all(probs >= 0)
        assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_rows_are_independent_in_eval_mode(self, rng):
        """Permuting the batch permutes the outputs."""
        model = HybridClassifier(SMALL, seed=0)
        rows = rng.normal(size=(6, 24))
        order = rng.permutation(6)
        assert_allclose(model.predict_proba(rows)[order], model.predict_proba(rows[order]), atol=1e-12)

    def test_dropout_only_in_training(self, rng):
        model = HybridClassifier(SMALL, seed=0)
        rows = rng.normal(size=(4, 24))
        a = model.forward(rows, training=False).data
        b = model.forward(rows, training=False, rng=np.random.default_rng(0)).data
        c = model.forward(rows, training=True, rng=np.random.default_rng(0)).data
        assert_allclose(a, b)
        assert not np.allclose(a, c)

    def test_wrong_width(self):
        with pytest.raises(ModelSpecError, match="expected rows of width 24"):
            HybridClassifier(SMALL, seed=0).predict_proba(np.zeros((2, 23)))

    def test_same_seed_same_weights(self):
        a = build(SMALL, seed=5).snapshot()
        b = build(SMALL, seed=5).snapshot()
        for name in a:
            assert_allclose(a[name], b[name])

    def test_attention_maps(self, rng):
        maps = HybridClassifier(SMALL, seed=0).attention_maps(rng.normal(size=(2, 24)))
        assert set(maps) == {"attn1", "attn2"}
        assert maps["attn2"].shape == (2, 2, 3, 3)

    def test_softmax_output_feeds_loss(self, rng):
        model = HybridClassifier(SMALL, seed=0)
        probs = model.forward(rng.normal(size=(2, 24)))
        loss = T.neg(T.mean(T.log(probs)))
        T.backward(loss)
        assert model.params["out.weight"].grad is not None
