"""Network building blocks: exchangeable layer, multi-head self-attention,
dense layer and sinusoidal positional encoding.

Feature tensors are channel-last.  The exchangeable layer maps
``(..., n, m, K) -> (..., n, m, O)``; attention runs over axis ``-2`` of a
``(..., S, d)`` tensor, so batch and the "other" set axis ride along as
leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import diffcore as dc

__all__ = [
    "ExchangeableParams", "AttentionParams", "DenseParams",
    "exchangeable_forward", "multi_head_attention", "dense_forward", "positional_encoding",
    "init_exchangeable", "init_attention", "init_dense", "activate",
]


def activate(x, name: str):
    if name == "tanh":
        return dc.tanh(x)
    if name == "identity":
        return x
    if name == "sigmoid":
        return dc.sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class ExchangeableParams:
    w1: Any
    w2: Any
    w3: Any
    w4: Any
    w5: Any
    activation: str = "tanh"

    def __post_init__(self):
        shapes = {tuple(np.shape(getattr(w, "data", w))) for w in (self.w1, self.w2, self.w3, self.w4)}
        if len(shapes) != 1:
            raise dc.ShapeError(f"exchangeable weights disagree: {sorted(shapes)}")


@dataclass
class AttentionParams:
    wq: Any
    wk: Any
    wv: Any
    wo: Any
    heads: int
    ln_gain: Any
    ln_bias: Any

    @property
    def model_dim(self) -> int:
        return np.shape(getattr(self.wq, "data", self.wq))[0]


@dataclass
class DenseParams:
    weight: Any
    bias: Any
    activation: str = "identity"


def exchangeable_forward(x, p: ExchangeableParams):
    """Permutation-equivariant map over the (n, m) grid.

    Each output channel mixes the element, its column mean over participants,
    its row mean over items and the global mean, all with shared weights.
    """
    x = dc.as_tensor(x)
    if x.ndim < 3:
        raise dc.ShapeError(f"exchangeable: need (..., n, m, K), got {x.shape}")
    k = np.shape(getattr(p.w1, "data", p.w1))[0]
    if x.shape[-1] != k:
        raise dc.ShapeError(f"exchangeable: input has {x.shape[-1]} channels, weights expect {k}")
    col = dc.mean(x, axis=-3, keepdims=True)
    row = dc.mean(x, axis=-2, keepdims=True)
    tot = dc.mean(row, axis=-3, keepdims=True)
    y = (dc.matmul(x, p.w1) + dc.matmul(col, p.w2)
         + dc.matmul(row, p.w3) + dc.matmul(tot, p.w4) + p.w5)
    return activate(y, p.activation)


def _split_heads(t, heads):
    # (..., S, d) -> (..., H, S, dk)
    shape = t.shape
    lead, s, d = shape[:-2], shape[-2], shape[-1]
    t = dc.reshape(t, lead + (s, heads, d // heads))
    nd = len(lead)
    return dc.transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(t):
    shape = t.shape
    lead, h, s, dk = shape[:-3], shape[-3], shape[-2], shape[-1]
    nd = len(lead)
    t = dc.transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return dc.reshape(t, lead + (s, h * dk))


def multi_head_attention(q, k, v, p: AttentionParams, *, normalize: bool = True):
    """Scaled dot-product attention with H heads over axis -2.

    Inputs are layer-normalised (shared gain/bias) before projection; the
    residual connection is left to the caller.
    """
    q, k, v = dc.as_tensor(q), dc.as_tensor(k), dc.as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise dc.ShapeError(f"attention: feature dims differ {q.shape}, {k.shape}, {v.shape}")
    if p.model_dim != d:
        raise dc.ShapeError(f"attention: params built for d={p.model_dim}, input has d={d}")
    if d % p.heads:
        raise ValueError(f"attention: {p.heads} heads do not divide model dim {d}")
    if normalize:
        if q is k and k is v:
            q = k = v = dc.layer_norm(q, p.ln_gain, p.ln_bias)
        else:
            q = dc.layer_norm(q, p.ln_gain, p.ln_bias)
            k = dc.layer_norm(k, p.ln_gain, p.ln_bias)
            v = dc.layer_norm(v, p.ln_gain, p.ln_bias)
    dk = d // p.heads
    qh = _split_heads(dc.matmul(q, p.wq), p.heads)
    kh = _split_heads(dc.matmul(k, p.wk), p.heads)
    vh = _split_heads(dc.matmul(v, p.wv), p.heads)
    nd = kh.ndim
    scores = dc.matmul(qh, dc.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2)))
    weights = dc.softmax(scores * (1.0 / np.sqrt(dk)), axis=-1)
    return dc.matmul(_merge_heads(dc.matmul(weights, vh)), p.wo)


def dense_forward(x, p: DenseParams):
    """Affine map on the trailing axis, shared across all leading indices."""
    x = dc.as_tensor(x)
    w = np.shape(getattr(p.weight, "data", p.weight))
    if x.shape[-1] != w[0]:
        raise dc.ShapeError(f"dense: input dim {x.shape[-1]} but weight is {w}")
    return activate(dc.matmul(x, p.weight) + p.bias, p.activation)


def positional_encoding(positions: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal table, shape (positions, dim)."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((positions, dim))
    table[:, 0::2] = np.sin(pos / freq)
    table[:, 1::2] = np.cos(pos / freq)
    return table


# ---------------------------------------------------------------------------
# initialisers (plain arrays, keyed by name)
# ---------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_exchangeable(rng, k: int, o: int, prefix: str) -> dict:
    # four weight blocks share the fan-in budget
    return {
        f"{prefix}.w1": _glorot(rng, 4 * k, o, (k, o)),
        f"{prefix}.w2": _glorot(rng, 4 * k, o, (k, o)),
        f"{prefix}.w3": _glorot(rng, 4 * k, o, (k, o)),
        f"{prefix}.w4": _glorot(rng, 4 * k, o, (k, o)),
        f"{prefix}.w5": np.zeros(o),
    }


def init_attention(rng, d: int, prefix: str) -> dict:
    return {
        f"{prefix}.wq": _glorot(rng, d, d),
        f"{prefix}.wk": _glorot(rng, d, d),
        f"{prefix}.wv": _glorot(rng, d, d),
        f"{prefix}.wo": _glorot(rng, d, d),
        f"{prefix}.ln_gain": np.ones(d),
        f"{prefix}.ln_bias": np.zeros(d),
    }


def init_dense(rng, din: int, dout: int, prefix: str) -> dict:
    return {f"{prefix}.weight": _glorot(rng, din, dout), f"{prefix}.bias": np.zeros(dout)}
