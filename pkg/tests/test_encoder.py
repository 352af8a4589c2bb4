"""Backbone checks: conv shape arithmetic, language embedding algebra,
chunk isolation, trainable-mask selection, and gradient verification."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import finite_difference_check
from scdlab import autodiff as ad
from scdlab.ctc import ctc_loss
from scdlab.encoder import (
    ModelConfig,
    attach_language,
    decoder_projection,
    downsampled_len,
    encoder_forward,
    feature_encoder,
    forward_log_posteriors,
    infer_log_posteriors,
    init_parameters,
    make_leaves,
    select_trainable,
)


def leaves_for(params):
    return make_leaves(params, trainable=None)


class TestFeatureEncoder:
    def test_hundred_frames_downsample_to_25(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((100, tiny_config.input_dim))
        out = feature_encoder(leaves_for(params), x)
        assert out.shape == (25, tiny_config.conv_out_dim)
        assert downsampled_len(100) == 25

    def test_five_frames_round_up_to_two(self, tiny_config):
        params = init_parameters(tiny_config)
        x = np.zeros((5, tiny_config.input_dim))
        out = feature_encoder(leaves_for(params), x)
        assert out.shape[0] == 2
        assert downsampled_len(5) == 2

    def test_too_few_frames(self, tiny_config):
        params = init_parameters(tiny_config)
        with pytest.raises(ValueError, match="too few frames"):
            feature_encoder(leaves_for(params), np.zeros((3, tiny_config.input_dim)))

    def test_conv_gradients_match_finite_differences(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((10, tiny_config.input_dim))
        probe_shape = feature_encoder(leaves_for(params), x).shape
        probe = rng.standard_normal(probe_shape)

        def loss_fn():
            return float((feature_encoder(leaves_for(params), x).data * probe).sum())

        leaves = make_leaves(params)
        feature_encoder(leaves, x).backward(probe)
        grads = {n: t.grad for n, t in leaves.items() if t.grad is not None}
        names = ["conv1/w", "conv1/b", "conv2/w", "conv2/b"]
        finite_difference_check(loss_fn, params, grads, names, rng, n_coords=100)


class TestAttachLanguage:
    def test_single_language_adds_constant_column(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(2)
        hidden = rng.standard_normal((4, tiny_config.conv_out_dim))
        # with the projection replaced by [I; rows], output = hidden + last rows
        out = attach_language(leaves_for(params), ad.Tensor(hidden), 0, tiny_config.n_languages)
        w = params["input_proj/w"]
        b = params["input_proj/b"]
        onehot = np.zeros((4, tiny_config.n_languages))
        onehot[:, 0] = 1.0
        expect = np.hstack([hidden, onehot]) @ w + b
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_language_changes_projection(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(3)
        hidden = rng.standard_normal((4, tiny_config.conv_out_dim))
        out0 = attach_language(leaves_for(params), ad.Tensor(hidden), 0, tiny_config.n_languages).data
        out1 = attach_language(leaves_for(params), ad.Tensor(hidden), 1, tiny_config.n_languages).data
        assert not np.allclose(out0, out1)

    def test_out_of_range_language(self, tiny_config):
        params = init_parameters(tiny_config)
        with pytest.raises(ValueError, match="language_id"):
            attach_language(leaves_for(params), ad.Tensor(np.zeros((2, tiny_config.conv_out_dim))), 5, tiny_config.n_languages)


def dense_block_oracle(params, x, config):
    """Independent full-attention forward of the encoder blocks in plain
    numpy (no tape, no chunking)."""

    def ln(v, g, b, eps=1e-6):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * g + b

    def softmax(v):
        e = np.exp(v - v.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    h = np.asarray(x, dtype=np.float64)
    dm = config.model_dim
    dh = dm // config.n_heads
    for i in range(config.n_layers):
        base = f"layer{i:02d}"
        a = ln(h, params[f"{base}/ln1/g"], params[f"{base}/ln1/b"])
        q, k, v = (a @ params[f"{base}/attn/w{n}"] for n in "qkv")
        heads = []
        for hd in range(config.n_heads):
            cols = slice(hd * dh, (hd + 1) * dh)
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
            heads.append(softmax(scores) @ v[:, cols])
        att = np.hstack(heads) @ params[f"{base}/attn/wo"] + params[f"{base}/attn/bo"]
        h = h + att
        f = ln(h, params[f"{base}/ln2/g"], params[f"{base}/ln2/b"])
        f = np.maximum(0.0, f @ params[f"{base}/ff/w1"] + params[f"{base}/ff/b1"])
        h = h + f @ params[f"{base}/ff/w2"] + params[f"{base}/ff/b2"]
    return h


class TestEncoderForward:
    def test_single_chunk_equals_dense_oracle(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(4)
        T = 7
        x = rng.standard_normal((T, tiny_config.model_dim))
        got = encoder_forward(leaves_for(params), x, tiny_config, chunk_frames=T + 50).data
        want = dense_block_oracle(params, x, tiny_config)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_chunk_isolation_bit_identical(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(5)
        T, chunk = 9, 3
        x = rng.standard_normal((T, tiny_config.model_dim))
        base = encoder_forward(leaves_for(params), x, tiny_config, chunk_frames=chunk).data
        x2 = x.copy()
        x2[chunk : 2 * chunk] += rng.standard_normal((chunk, tiny_config.model_dim))
        bumped = encoder_forward(leaves_for(params), x2, tiny_config, chunk_frames=chunk).data
        assert np.array_equal(base[:chunk], bumped[:chunk])
        assert np.array_equal(base[2 * chunk :], bumped[2 * chunk :])
        assert not np.array_equal(base[chunk : 2 * chunk], bumped[chunk : 2 * chunk])

    def test_block_gradients_match_finite_differences(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((7, tiny_config.model_dim))
        probe = rng.standard_normal((7, tiny_config.model_dim))

        def loss_fn():
            return float((encoder_forward(leaves_for(params), x, tiny_config).data * probe).sum())

        leaves = make_leaves(params)
        encoder_forward(leaves, x, tiny_config).backward(probe)
        grads = {n: t.grad for n, t in leaves.items() if t.grad is not None}
        names = sorted(n for n in grads if n.startswith("layer"))
        finite_difference_check(loss_fn, params, grads, names, rng, n_coords=120)


class TestDecoderProjection:
    def test_zero_weights_give_uniform_rows(self, tiny_config):
        params = init_parameters(tiny_config)
        params["decoder/w"][:] = 0.0
        params["decoder/b"][:] = 0.0
        rng = np.random.default_rng(7)
        hidden = ad.Tensor(rng.standard_normal((5, tiny_config.model_dim)))
        out = decoder_projection(leaves_for(params), hidden).data
        np.testing.assert_allclose(out, -np.log(tiny_config.vocab_size), atol=1e-12)

    def test_rows_sum_to_one(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(8)
        hidden = ad.Tensor(rng.standard_normal((6, tiny_config.model_dim)))
        out = decoder_projection(leaves_for(params), hidden).data
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-9)

    def test_decoder_gradients_through_ctc(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(9)
        feats = rng.standard_normal((12, tiny_config.input_dim))
        target = [2, 3, 2]

        def loss_fn():
            logp = infer_log_posteriors(params, tiny_config, feats, 0)
            return ctc_loss(logp, target, 0).nll

        leaves = make_leaves(params)
        logp_t = forward_log_posteriors(leaves, tiny_config, feats, 0)
        res = ctc_loss(logp_t.data, target, 0)
        logp_t.backward(res.grad)
        grads = {n: t.grad for n, t in leaves.items() if t.grad is not None}
        names = ["decoder/w", "decoder/b", "decoder/ln_g", "decoder/ln_b", "input_proj/w"]
        finite_difference_check(loss_fn, params, grads, names, rng, n_coords=100)


class TestSelectTrainable:
    def test_all(self, tiny_config):
        params = init_parameters(tiny_config)
        mask = select_trainable(params, "all", tiny_config.n_layers)
        assert all(mask.values())

    def test_first_and_last_4_of_32(self):
        config = ModelConfig(
            input_dim=4, n_languages=1, model_dim=4, n_layers=32, n_heads=2,
            chunk_frames=4, vocab_size=4, conv_channels=(1, 1), ff_dim=4,
        )
        params = init_parameters(config)
        mask = select_trainable(params, "first_and_last_4", 32)
        selected = {int(n[5:7]) for n, flag in mask.items() if n.startswith("layer") and flag}
        assert selected == {0, 1, 2, 3, 28, 29, 30, 31}

    def test_first_zero_keeps_only_always_on_group(self, tiny_config):
        params = init_parameters(tiny_config)
        mask = select_trainable(params, "first_0", tiny_config.n_layers)
        on = {n for n, flag in mask.items() if flag}
        assert on == {n for n in params if n.startswith(("conv1/", "conv2/", "input_proj/", "decoder/"))}
        assert not any(n.startswith("layer") for n in on)

    def test_k_too_large(self, tiny_config):
        params = init_parameters(tiny_config)
        with pytest.raises(ValueError, match="has 2"):
            select_trainable(params, "last_3", tiny_config.n_layers)

    def test_bad_spec(self, tiny_config):
        params = init_parameters(tiny_config)
        with pytest.raises(ValueError, match="spec"):
            select_trainable(params, "middle_2", tiny_config.n_layers)


class TestDeterminism:
    def test_forward_is_pure(self, tiny_config):
        params = init_parameters(tiny_config)
        rng = np.random.default_rng(10)
        feats = rng.standard_normal((16, tiny_config.input_dim))
        a = infer_log_posteriors(params, tiny_config, feats, 1)
        b = infer_log_posteriors(params, tiny_config, feats, 1)
        assert np.array_equal(a, b)

    def test_init_deterministic_per_seed(self, tiny_config):
        p1 = init_parameters(tiny_config)
        p2 = init_parameters(tiny_config)
        assert all(np.array_equal(p1[n], p2[n]) for n in p1)
