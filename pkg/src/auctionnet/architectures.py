"""Mechanism networks: bid matrix -> (allocation, payment fraction, payment).

Three variants share one container, :class:`MechanismNetwork`:

* ``regretnet``      flattened bids through two fully-connected stacks
* ``equivariantnet`` exchangeable-layer trunk with allocation/payment heads
* ``regretformer``   exchangeable embedding, item-wise and participant-wise
                     self-attention blocks, row/column pooling and linear
                     output heads

Every variant allocates through a softmax over ``n + 1`` rows (the last row is
the "no sale" participant) and charges ``p_i = frac_i * sum_j z_ij b_ij``, so
truthful reports are individually rational by construction.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .layers import (
    AttentionParams, DenseParams, ExchangeableParams, dense_forward, exchangeable_forward,
    init_attention, init_dense, init_exchangeable, multi_head_attention, positional_encoding,
)

__all__ = [
    "VARIANTS", "ForwardOutput", "MechanismNetwork", "build_network", "default_hyper",
    "compute_payments", "regretnet_forward", "equivariantnet_forward", "regretformer_forward",
    "FixedShapeError",
]

VARIANTS = ("regretnet", "equivariantnet", "regretformer")

# setting label -> hyperparameters; "multi" is also the fallback for unlisted sizes
_TABLE = {
    "regretnet": {
        # per-stack width; two stacks of 100 reproduce the published parameter counts
        "1x2": dict(layers=3, hidden=100), "2x2": dict(layers=3, hidden=100),
        "2x3": dict(layers=3, hidden=100), "2x5": dict(layers=6, hidden=100),
        "3x10": dict(layers=6, hidden=100), "multi": dict(layers=6, hidden=100),
    },
    "equivariantnet": {
        "1x2": dict(layers=3, hidden=32), "2x2": dict(layers=3, hidden=32),
        "2x3": dict(layers=5, hidden=32), "2x5": dict(layers=6, hidden=32),
        "3x10": dict(layers=6, hidden=32), "multi": dict(layers=6, hidden=32),
    },
    "regretformer": {
        "1x2": dict(blocks=1, heads=2, hidden=32), "2x2": dict(blocks=1, heads=2, hidden=64),
        "2x3": dict(blocks=1, heads=2, hidden=64), "2x5": dict(blocks=2, heads=4, hidden=128),
        "3x10": dict(blocks=2, heads=4, hidden=128), "multi": dict(blocks=2, heads=4, hidden=128),
    },
}


class FixedShapeError(dc.ShapeError):
    """A fixed-size network was given a bid matrix of another shape."""


def default_hyper(variant: str, label: str = "multi", desk: bool = False) -> dict:
    if variant not in _TABLE:
        raise ValueError(f"unknown architecture {variant!r}; choose from {VARIANTS}")
    hyper = dict(_TABLE[variant].get(label, _TABLE[variant]["multi"]))
    if desk:
        hyper["hidden"] = max(hyper.get("heads", 1) * 2, hyper["hidden"] // 2)
    return hyper


@dataclass
class ForwardOutput:
    allocation: dc.Tensor          # (B, n+1, m), last row = unallocated
    payment_fraction: dc.Tensor    # (B, n)
    payment: dc.Tensor             # (B, n)
    logits: dc.Tensor              # (B, n+1, m), pre-softmax


def compute_payments(z, frac, bids):
    """p_i = frac_i * sum_j z_ij b_ij; a trailing unallocated row in z is ignored."""
    z, frac, bids = dc.as_tensor(z), dc.as_tensor(frac), dc.as_tensor(bids)
    n = bids.shape[-2]
    if z.shape[-2] == n + 1:
        z = z[..., :n, :]
    return frac * dc.sum(z * bids, axis=-1)


@dataclass
class MechanismNetwork:
    variant: str
    n: int
    m: int
    hyper: dict
    params: dict = field(repr=False)
    padded: bool = False
    use_pe: bool = False
    pe_mode: str = "features"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown architecture {self.variant!r}")
        if self.pe_mode not in ("features", "input"):
            raise ValueError(f"pe_mode must be 'features' or 'input', got {self.pe_mode!r}")
        self._const = None

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def accepts(self, n: int, m: int) -> bool:
        if self.variant != "regretnet":
            return True
        if self.padded:
            return n <= self.n and m <= self.m
        return (n, m) == (self.n, self.m)

    def tensors(self, requires_grad: bool = False) -> dict:
        if requires_grad:
            return {k: dc.Tensor(v, requires_grad=True) for k, v in self.params.items()}
        if self._const is None or any(t.data is not self.params[k] for k, t in self._const.items()):
            self._const = {k: dc.Tensor(v) for k, v in self.params.items()}
        return self._const

    def forward(self, bids, params: dict | None = None) -> ForwardOutput:
        bids = dc.as_tensor(bids)
        if bids.ndim == 2:
            bids = dc.reshape(bids, (1,) + bids.shape)
        if bids.ndim != 3:
            raise dc.ShapeError(f"bids must be (B, n, m), got {bids.shape}")
        p = params if params is not None else self.tensors()
        return _FORWARD[self.variant](bids, self, p)

    __call__ = forward

    def copy(self) -> "MechanismNetwork":
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.hyper = dict(self.hyper)
        other._const = None
        return other

    def param_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))

    def astype(self, dtype) -> "MechanismNetwork":
        other = self.copy()
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        return other


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_network(variant: str, n: int, m: int, hyper: dict | None = None, seed: int = 0,
                  *, padded: bool = False, use_pe: bool = False, pe_mode: str = "features",
                  label: str | None = None, desk: bool = False, dtype=None) -> MechanismNetwork:
    """Randomly initialised network; hyperparameters default to the per-setting table."""
    hyper = dict(hyper) if hyper else default_hyper(variant, label or f"{n}x{m}", desk=desk)
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict = {}
    if variant == "regretnet":
        layers, h = hyper["layers"], hyper["hidden"]
        for stack, out_dim in (("alloc", (n + 1) * m), ("pay", n)):
            dims = [n * m] + [h] * (layers - 1) + [out_dim]
            for k in range(layers):
                params.update(init_dense(rng, dims[k], dims[k + 1], f"{stack}.{k}"))
    elif variant == "equivariantnet":
        layers, h = hyper["layers"], hyper["hidden"]
        dims = [1] + [h] * (layers - 1)
        for k in range(layers - 1):
            params.update(init_exchangeable(rng, dims[k], dims[k + 1], f"trunk.{k}"))
        params.update(init_exchangeable(rng, dims[-1], 1, "alloc_head"))
        params.update(init_exchangeable(rng, dims[-1], 1, "pay_head"))
    elif variant == "regretformer":
        d, heads, blocks = hyper["hidden"], hyper["heads"], hyper["blocks"]
        if d % heads:
            raise ValueError(f"{heads} heads do not divide hidden dim {d}")
        if use_pe and d % 2:
            raise ValueError("positional encoding needs an even hidden dim")
        params.update(init_exchangeable(rng, 1, d, "embed"))
        for t in range(blocks):
            params.update(init_attention(rng, d, f"block{t}.item"))
            params.update(init_attention(rng, d, f"block{t}.part"))
            params.update(init_dense(rng, 2 * d, d, f"block{t}.fc"))
        params.update(init_dense(rng, d, d, "out.part"))
        params.update(init_dense(rng, d, d, "out.item"))
        # the logit is a d-term dot product; shrink both heads so its initial
        # scale does not grow with d (wide nets otherwise start saturated)
        for head in ("out.part.weight", "out.item.weight"):
            params[head] *= d ** -0.25
        params.update(init_dense(rng, d, 1, "out.pay"))
    else:
        raise ValueError(f"unknown architecture {variant!r}; choose from {VARIANTS}")
    if dtype is not None:
        params = {k: v.astype(dtype) for k, v in params.items()}
    return MechanismNetwork(variant, n, m, hyper, params, padded=padded,
                            use_pe=use_pe, pe_mode=pe_mode)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _exch(p, prefix, activation="tanh"):
    return ExchangeableParams(p[f"{prefix}.w1"], p[f"{prefix}.w2"], p[f"{prefix}.w3"],
                              p[f"{prefix}.w4"], p[f"{prefix}.w5"], activation)


def _dense(p, prefix, activation="identity"):
    return DenseParams(p[f"{prefix}.weight"], p[f"{prefix}.bias"], activation)


def _attn(p, prefix, heads):
    return AttentionParams(p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"],
                           p[f"{prefix}.wo"], heads, p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_bias"])


def _softmax_with_dummy(logits, dummy):
    full = dc.concat([logits, dummy], axis=-2)
    return full, dc.softmax(full, axis=-2)


def _pad(bids, n_frame, m_frame):
    b, n, m = bids.shape
    dtype = bids.data.dtype
    if m < m_frame:
        bids = dc.concat([bids, np.zeros((b, n, m_frame - m), dtype=dtype)], axis=2)
    if n < n_frame:
        bids = dc.concat([bids, np.zeros((b, n_frame - n, m_frame), dtype=dtype)], axis=1)
    return bids


def regretnet_forward(bids, net: MechanismNetwork, p: dict) -> ForwardOutput:
    bsz, n, m = bids.shape
    if not net.accepts(n, m):
        raise FixedShapeError(
            f"regretnet is fixed to {net.n}x{net.m}{' (padded frame)' if net.padded else ''}; got {n}x{m}")
    big_n, big_m = net.n, net.m
    x = _pad(bids, big_n, big_m) if (n, m) != (big_n, big_m) else bids
    flat = dc.reshape(x, (bsz, big_n * big_m))
    layers = net.hyper["layers"]

    h = flat
    for k in range(layers - 1):
        h = dense_forward(h, _dense(p, f"alloc.{k}", "tanh"))
    logits = dc.reshape(dense_forward(h, _dense(p, f"alloc.{layers - 1}")), (bsz, big_n + 1, big_m))
    if (n, m) != (big_n, big_m):
        # padded participants can never win; padded items are dropped
        block = np.zeros((big_n + 1, 1), dtype=bids.data.dtype)
        block[n:big_n] = -1e9
        logits = logits + block
        z = dc.softmax(logits, axis=-2)
        keep = list(range(n)) + [big_n]
        logits = logits[:, keep, :m]
        z = z[:, keep, :m]
    else:
        z = dc.softmax(logits, axis=-2)

    h = flat
    for k in range(layers - 1):
        h = dense_forward(h, _dense(p, f"pay.{k}", "tanh"))
    frac = dc.sigmoid(dense_forward(h, _dense(p, f"pay.{layers - 1}")))
    if n != big_n:
        frac = frac[:, :n]
    return ForwardOutput(z, frac, compute_payments(z, frac, bids), logits)


def equivariantnet_forward(bids, net: MechanismNetwork, p: dict) -> ForwardOutput:
    bsz, n, m = bids.shape
    x = dc.reshape(bids, (bsz, n, m, 1))
    for k in range(net.hyper["layers"] - 1):
        x = exchangeable_forward(x, _exch(p, f"trunk.{k}"))
    alloc = dc.reshape(exchangeable_forward(x, _exch(p, "alloc_head", "identity")), (bsz, n, m))
    dummy = np.zeros((bsz, 1, m), dtype=bids.data.dtype)
    logits, z = _softmax_with_dummy(alloc, dummy)
    pay = exchangeable_forward(x, _exch(p, "pay_head", "identity"))
    frac = dc.sigmoid(dc.reshape(dc.mean(pay, axis=2), (bsz, n)))
    return ForwardOutput(z, frac, compute_payments(z, frac, bids), logits)


def regretformer_forward(bids, net: MechanismNetwork, p: dict) -> ForwardOutput:
    bsz, n, m = bids.shape
    d, heads = net.hyper["hidden"], net.hyper["heads"]
    dtype = bids.data.dtype
    x = bids
    if net.use_pe and net.pe_mode == "input":
        x = x + positional_encoding(m, 2)[:, 0].astype(dtype)
    feats = exchangeable_forward(dc.reshape(x, (bsz, n, m, 1)), _exch(p, "embed"))
    if net.use_pe and net.pe_mode == "features":
        feats = feats + positional_encoding(m, d).astype(dtype)
    for t in range(net.hyper["blocks"]):
        item = multi_head_attention(feats, feats, feats, _attn(p, f"block{t}.item", heads)) + feats
        swapped = dc.transpose(feats, (0, 2, 1, 3))
        part = multi_head_attention(swapped, swapped, swapped, _attn(p, f"block{t}.part", heads))
        part = dc.transpose(part, (0, 2, 1, 3)) + feats
        mixed = dense_forward(dc.concat([item, part], axis=-1), _dense(p, f"block{t}.fc", "tanh"))
        feats = mixed + feats
    participants = dc.mean(feats, axis=2)       # (B, n, d)
    items = dc.mean(feats, axis=1)              # (B, m, d)
    # linear output heads (no tanh) before the logit product and the payment
    part_out = dense_forward(participants, _dense(p, "out.part"))
    item_out = dense_forward(items, _dense(p, "out.item"))
    raw = dc.matmul(part_out, dc.transpose(item_out, (0, 2, 1)))
    dummy = -dc.sum(raw, axis=1, keepdims=True)
    logits, z = _softmax_with_dummy(raw, dummy)
    frac = dc.sigmoid(dc.reshape(dense_forward(participants, _dense(p, "out.pay")), (bsz, n)))
    return ForwardOutput(z, frac, compute_payments(z, frac, bids), logits)


_FORWARD = {
    "regretnet": regretnet_forward,
    "equivariantnet": equivariantnet_forward,
    "regretformer": regretformer_forward,
}
