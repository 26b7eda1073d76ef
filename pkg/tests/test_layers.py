import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from auctionnet import diffcore as dc
from auctionnet.layers import (
    AttentionParams, DenseParams, ExchangeableParams, dense_forward, exchangeable_forward,
    init_attention, init_exchangeable, multi_head_attention, positional_encoding,
)


def exch_params(rng, k, o, activation="tanh"):
    raw = init_exchangeable(rng, k, o, "e")
    raw["e.w5"] = rng.normal(size=o)
    return ExchangeableParams(*(raw[f"e.w{i}"] for i in range(1, 6)), activation=activation)


def attn_params(rng, d, heads):
    raw = init_attention(rng, d, "a")
    raw["a.ln_gain"] = rng.uniform(0.5, 1.5, size=d)
    raw["a.ln_bias"] = rng.normal(scale=0.1, size=d)
    return AttentionParams(raw["a.wq"], raw["a.wk"], raw["a.wv"], raw["a.wo"], heads,
                           raw["a.ln_gain"], raw["a.ln_bias"])


def reference_exchangeable(x, p):
    # direct loop over output channels, Eq.-15 style with explicit sums
    n, m, k = x.shape
    o = p.w1.shape[1]
    y = np.empty((n, m, o))
    for c in range(o):
        for i in range(n):
            for j in range(m):
                acc = p.w5[c]
                for q in range(k):
                    acc += (p.w1[q, c] * x[i, j, q]
                            + p.w2[q, c] * x[:, j, q].sum() / n
                            + p.w3[q, c] * x[i, :, q].sum() / m
                            + p.w4[q, c] * x[:, :, q].sum() / (n * m))
                y[i, j, c] = acc
    return np.tanh(y) if p.activation == "tanh" else y


class TestExchangeable:
    def test_matches_reference_loop(self, rng):
        x = rng.normal(size=(3, 4, 2))
        p = exch_params(rng, 2, 5)
        assert_allclose(exchangeable_forward(x[None], p).data[0], reference_exchangeable(x, p),
                        rtol=1e-12, atol=1e-14)

    def test_zero_weights_give_bias(self, rng):
        z = np.zeros((2, 3))
        p = ExchangeableParams(z, z, z, z, np.full(3, 0.3))
        y = exchangeable_forward(rng.normal(size=(1, 4, 5, 2)), p).data
        assert_allclose(y, np.tanh(0.3))

    def test_identity_case(self, rng):
        one, zero = np.ones((1, 1)), np.zeros((1, 1))
        p = ExchangeableParams(one, zero, zero, zero, np.zeros(1), activation="identity")
        x = rng.normal(size=(2, 3, 4, 1))
        assert_array_equal(exchangeable_forward(x, p).data, x)

    def test_row_and_column_equivariance(self, rng):
        x = rng.normal(size=(1, 4, 5, 3))
        p = exch_params(rng, 3, 6)
        y = exchangeable_forward(x, p).data
        rows, cols = rng.permutation(4), rng.permutation(5)
        y_perm = exchangeable_forward(x[:, rows][:, :, cols], p).data
        assert_allclose(y_perm, y[:, rows][:, :, cols], rtol=0, atol=1e-10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(dc.ShapeError):
            exchangeable_forward(rng.normal(size=(1, 2, 2, 3)), exch_params(rng, 2, 4))

    def test_weight_shapes_must_agree(self):
        with pytest.raises(dc.ShapeError):
            ExchangeableParams(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)), np.ones((2, 3)), np.zeros(3))

    @pytest.mark.parametrize("which", ["w1", "w2", "w3", "w4", "w5", "x"])
    def test_gradients(self, rng, which):
        x = rng.normal(size=(2, 3, 4, 2))
        p = exch_params(rng, 2, 3)
        w = rng.normal(size=(2, 3, 4, 3))

        def f(t):
            q = ExchangeableParams(**{**p.__dict__, which: t}) if which != "x" else p
            return dc.sum(exchangeable_forward(t if which == "x" else x, q) * w)

        start = x if which == "x" else getattr(p, which)
        assert dc.finite_difference_check(f, start) <= 1e-4


class TestAttention:
    def test_single_position_is_value_path(self, rng):
        p = attn_params(rng, 4, 2)
        x = rng.normal(size=(3, 1, 4))
        ln = dc.layer_norm(dc.Tensor(x), p.ln_gain, p.ln_bias).data
        assert_allclose(multi_head_attention(x, x, x, p).data, ln @ p.wv @ p.wo, rtol=1e-12)

    def test_zero_values_give_zero(self, rng):
        p = attn_params(rng, 4, 2)
        p.wv = np.zeros((4, 4))
        x = rng.normal(size=(2, 5, 4))
        assert_array_equal(multi_head_attention(x, x, x, p).data, 0.0)

    def test_position_equivariance(self, rng):
        p = attn_params(rng, 6, 3)
        x = rng.normal(size=(2, 5, 6))
        perm = rng.permutation(5)
        y = multi_head_attention(x, x, x, p).data
        yp = multi_head_attention(x[:, perm], x[:, perm], x[:, perm], p).data
        assert_allclose(yp, y[:, perm], rtol=0, atol=1e-10)

    def test_matches_explicit_heads(self, rng):
        d, h = 6, 3
        p = attn_params(rng, d, h)
        x = rng.normal(size=(4, d))
        mu = x.mean(-1, keepdims=True)
        ln = (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * p.ln_gain + p.ln_bias
        dk = d // h
        heads = []
        for k in range(h):
            sl = slice(k * dk, (k + 1) * dk)
            q, kk, v = ln @ p.wq[:, sl], ln @ p.wk[:, sl], ln @ p.wv[:, sl]
            s = q @ kk.T / np.sqrt(dk)
            a = np.exp(s - s.max(-1, keepdims=True))
            heads.append(a / a.sum(-1, keepdims=True) @ v)
        expected = np.concatenate(heads, axis=-1) @ p.wo
        assert_allclose(multi_head_attention(x, x, x, p).data, expected, rtol=1e-12, atol=1e-14)

    def test_heads_must_divide(self, rng):
        p = attn_params(rng, 6, 4)
        x = rng.normal(size=(3, 6))
        with pytest.raises(ValueError, match="divide"):
            multi_head_attention(x, x, x, p)

    def test_gradients(self, rng):
        p = attn_params(rng, 4, 2)
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(2, 3, 4))
        assert dc.finite_difference_check(
            lambda t: dc.sum(multi_head_attention(t, t, t, p) * w), x) <= 1e-4
        for name in ("wq", "wk", "wv", "wo", "ln_gain", "ln_bias"):
            def f(t, name=name):
                q = AttentionParams(**{**p.__dict__, name: t})
                return dc.sum(multi_head_attention(x, x, x, q) * w)
            assert dc.finite_difference_check(f, getattr(p, name)) <= 1e-4, name

    def test_pe_breaks_equivariance(self, rng):
        p = attn_params(rng, 4, 2)
        x = rng.normal(size=(1, 5, 4))
        pe = positional_encoding(5, 4)
        perm = np.array([1, 0, 2, 3, 4])
        y = multi_head_attention(x + pe, x + pe, x + pe, p).data
        xp = x[:, perm] + pe
        yp = multi_head_attention(xp, xp, xp, p).data
        assert np.abs(yp - y[:, perm]).max() > 1e-6


class TestDense:
    def test_zero_weights_give_bias(self, rng):
        p = DenseParams(np.zeros((3, 2)), np.array([0.5, -1.0]))
        assert_array_equal(dense_forward(rng.normal(size=(4, 3)), p).data, [[0.5, -1.0]] * 4)

    def test_identity(self, rng):
        x = rng.normal(size=(2, 5, 3))
        assert_array_equal(dense_forward(x, DenseParams(np.eye(3), np.zeros(3))).data, x)

    def test_shape_mismatch(self, rng):
        with pytest.raises(dc.ShapeError):
            dense_forward(rng.normal(size=(2, 4)), DenseParams(np.eye(3), np.zeros(3)))

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 4, 3))
        wt, b = rng.normal(size=(3, 5)), rng.normal(size=5)
        w = rng.normal(size=(2, 4, 5))
        f = lambda t: dc.sum(dense_forward(x, DenseParams(t, b, "tanh")) * w)
        g = lambda t: dc.sum(dense_forward(x, DenseParams(wt, t, "sigmoid")) * w)
        assert dc.finite_difference_check(f, wt) <= 1e-4
        assert dc.finite_difference_check(g, b) <= 1e-4


class TestPositionalEncoding:
    def test_position_zero(self):
        assert_array_equal(positional_encoding(3, 6)[0], [0, 1, 0, 1, 0, 1])

    def test_range(self):
        pe = positional_encoding(64, 16)
        assert np.all(np.abs(pe) <= 1.0)

    def test_rows_distinct(self):
        pe = positional_encoding(64, 2)
        dist = np.abs(pe[:, None, :] - pe[None, :, :]).sum(-1)
        assert (dist[~np.eye(64, dtype=bool)] > 0).all()

    def test_formula(self):
        pe = positional_encoding(5, 4)
        assert_allclose(pe[3, 2], np.sin(3 / 10000 ** (2 / 4)))
        assert_allclose(pe[3, 3], np.cos(3 / 10000 ** (2 / 4)))

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(4, 3)
