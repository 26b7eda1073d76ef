"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Every primitive is a pair of numpy functions: ``forward`` computes the result
and a context, ``backward`` maps the output gradient to operand gradients.
Results that depend on a ``requires_grad`` operand are appended to the
active :class:`Tape`; :func:`backward` walks that tape in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "apply_primitive", "backward", "finite_difference_check",
    "no_grad", "strict_mode", "set_strict", "set_default_dtype", "get_default_dtype",
    "as_tensor", "matmul", "transpose", "reshape", "concat", "stack", "add", "sub",
    "mul", "div", "neg", "tanh", "sigmoid", "exp", "log", "softmax", "log_softmax",
    "layer_norm", "sum", "mean", "max", "clip", "getitem", "max_scalars",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self):
        self.tape = None
        self.grad_enabled = True


_state = _State()
_config = {"strict": False, "dtype": np.float64}


def set_strict(flag: bool) -> None:
    """Toggle non-finite operand checking for every primitive."""
    _config["strict"] = bool(flag)


@contextmanager
def strict_mode(flag: bool = True):
    old = _config["strict"]
    _config["strict"] = flag
    try:
        yield
    finally:
        _config["strict"] = old


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _config["dtype"] = dtype.type


def get_default_dtype():
    return _config["dtype"]


@contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager to scope recording; otherwise a per-thread
    implicit tape is created on demand and replaced once consumed.
    """

    def __init__(self):
        self.records: list[tuple] = []
        self.consumed = False
        self._prev = None

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def clear(self):
        self.records.clear()


def _active_tape() -> Tape:
    tape = _state.tape
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


class Tensor:
    """Dense array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # float arrays keep their precision; everything else takes the default
            kind = getattr(data, "dtype", None)
            dtype = kind if kind is not None and kind.kind == "f" else _config["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._index = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, fn, a, b):
    try:
        return fn(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add_fwd(a, b):
    return _binary("add", np.add, a, b), (a.shape, b.shape)


def _add_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


def _sub_fwd(a, b):
    return _binary("sub", np.subtract, a, b), (a.shape, b.shape)


def _sub_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None)


def _mul_fwd(a, b):
    return _binary("mul", np.multiply, a, b), (a, b)


def _mul_bwd(ctx, g, needs):
    a, b = ctx
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _div_fwd(a, b):
    return _binary("div", np.divide, a, b), (a, b)


def _div_bwd(ctx, g, needs):
    a, b = ctx
    return (_unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None)


def _neg_fwd(a):
    return -a, None


def _neg_bwd(ctx, g, needs):
    return (-g,)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight over leading axes: one flat GEMM
        out = (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
        return out, (a, b, True)
    try:
        out = np.matmul(a, b)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch extents {a.shape} @ {b.shape}") from None
    return out, (a, b, False)


def _matmul_bwd(ctx, g, needs):
    a, b, flat = ctx
    ga = gb = None
    if flat:
        g2 = g.reshape(-1, g.shape[-1])
        if needs[0]:
            ga = (g2 @ b.T).reshape(a.shape)
        if needs[1]:
            gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    if needs[0]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needs[1]:
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def _transpose_fwd(a, axes=None):
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.transpose(a, axes), axes


def _transpose_bwd(axes, g, needs):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (np.transpose(g, inv),)


def _reshape_fwd(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return out, a.shape


def _reshape_bwd(shape, g, needs):
    return (g.reshape(shape),)


def _concat_fwd(*arrays, axis=0):
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        shapes = [x.shape for x in arrays]
        raise ShapeError(f"concat: extents {shapes} disagree off axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return out, (sizes, axis)


def _concat_bwd(ctx, g, needs):
    sizes, axis = ctx
    parts = np.split(g, sizes, axis=axis)
    return tuple(p if n else None for p, n in zip(parts, needs))


def _stack_fwd(*arrays, axis=0):
    try:
        out = np.stack(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes {[x.shape for x in arrays]} differ") from None
    return out, axis


def _stack_bwd(axis, g, needs):
    parts = np.moveaxis(g, axis, 0)
    return tuple(parts[k] if n else None for k, n in enumerate(needs))


def _getitem_fwd(a, index):
    return a[index], (a.shape, index)


def _getitem_bwd(ctx, g, needs):
    shape, index = ctx
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, index, g)
    return (out,)


def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


def _tanh_bwd(y, g, needs):
    return (g * (1.0 - y * y),)


def _sigmoid_fwd(a):
    # split by sign so exp never overflows
    y = np.empty_like(a)
    pos = a >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    y[~pos] = ea / (1.0 + ea)
    return y, y


def _sigmoid_bwd(y, g, needs):
    return (g * y * (1.0 - y),)


def _exp_fwd(a):
    y = np.exp(a)
    return y, y


def _exp_bwd(y, g, needs):
    return (g * y,)


def _log_fwd(a):
    return np.log(a), a


def _log_bwd(a, g, needs):
    return (g / a,)


def _softmax_fwd(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_bwd(ctx, g, needs):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_fwd(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return y, (y, axis)


def _log_softmax_bwd(ctx, g, needs):
    y, axis = ctx
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def _layer_norm_fwd(x, gamma, beta, eps=1e-5):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs features {x.shape[-1:]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def _layer_norm_bwd(ctx, g, needs):
    xhat, inv, gamma = ctx
    gx = gg = gb = None
    if needs[0]:
        gh = g * gamma
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(g.ndim - 1))
    if needs[1]:
        gg = (g * xhat).sum(axis=lead)
    if needs[2]:
        gb = g.sum(axis=lead)
    return gx, gg, gb


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum_fwd(a, axis=None, keepdims=False):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, _norm_axis(axis, a.ndim), keepdims)


def _sum_bwd(ctx, g, needs):
    shape, axes, keepdims = ctx
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[k] for k in axes])) if axes else 1
    return a.mean(axis=axis, keepdims=keepdims), (a.shape, axes, keepdims, count)


def _mean_bwd(ctx, g, needs):
    shape, axes, keepdims, count = ctx
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / count, shape).copy(),)


def _max_fwd(a, axis=None, keepdims=False):
    return a.max(axis=axis, keepdims=keepdims), (a, _norm_axis(axis, a.ndim), keepdims)


def _max_bwd(ctx, g, needs):
    a, axes, keepdims = ctx
    # route the gradient to the first maximiser only
    tail = tuple(range(a.ndim - len(axes), a.ndim))
    moved = np.moveaxis(a, axes, tail)
    flat = moved.reshape(moved.shape[:a.ndim - len(axes)] + (-1,))
    hit = np.zeros_like(flat)
    np.put_along_axis(hit, flat.argmax(axis=-1)[..., None], 1.0, axis=-1)
    hit = np.moveaxis(hit.reshape(moved.shape), tail, axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (hit * g,)


def _clip_fwd(a, lo=None, hi=None):
    y = np.clip(a, lo, hi)
    return y, (a, lo, hi)


def _clip_bwd(ctx, g, needs):
    a, lo, hi = ctx
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a >= lo
    if hi is not None:
        inside &= a <= hi
    return (np.where(inside, g, 0.0),)


class _Primitive:
    __slots__ = ("name", "forward", "backward", "variadic")

    def __init__(self, name, forward, backward, variadic=False):
        self.name = name
        self.forward = forward
        self.backward = backward
        self.variadic = variadic


PRIMITIVES: dict[str, _Primitive] = {
    p.name: p for p in (
        _Primitive("add", _add_fwd, _add_bwd),
        _Primitive("sub", _sub_fwd, _sub_bwd),
        _Primitive("mul", _mul_fwd, _mul_bwd),
        _Primitive("div", _div_fwd, _div_bwd),
        _Primitive("neg", _neg_fwd, _neg_bwd),
        _Primitive("matmul", _matmul_fwd, _matmul_bwd),
        _Primitive("transpose", _transpose_fwd, _transpose_bwd),
        _Primitive("reshape", _reshape_fwd, _reshape_bwd),
        _Primitive("concat", _concat_fwd, _concat_bwd, variadic=True),
        _Primitive("stack", _stack_fwd, _stack_bwd, variadic=True),
        _Primitive("getitem", _getitem_fwd, _getitem_bwd),
        _Primitive("tanh", _tanh_fwd, _tanh_bwd),
        _Primitive("sigmoid", _sigmoid_fwd, _sigmoid_bwd),
        _Primitive("exp", _exp_fwd, _exp_bwd),
        _Primitive("log", _log_fwd, _log_bwd),
        _Primitive("softmax", _softmax_fwd, _softmax_bwd),
        _Primitive("log_softmax", _log_softmax_fwd, _log_softmax_bwd),
        _Primitive("layer_norm", _layer_norm_fwd, _layer_norm_bwd),
        _Primitive("sum", _sum_fwd, _sum_bwd),
        _Primitive("mean", _mean_fwd, _mean_bwd),
        _Primitive("max", _max_fwd, _max_bwd),
        _Primitive("clip", _clip_fwd, _clip_bwd),
    )
}


def apply_primitive(op: str, operands: Sequence, attrs: dict | None = None) -> Tensor:
    """Evaluate primitive ``op`` and record it on the tape when needed."""
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise KeyError(f"unknown primitive {op!r}")
    tensors = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in operands)
    arrays = [t.data for t in tensors]
    if _config["strict"]:
        for k, arr in enumerate(arrays):
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"{op}: operand {k} contains NaN/Inf")
    out_data, ctx = prim.forward(*arrays, **(attrs or {}))
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._tape = None
    out._index = -1
    out.requires_grad = False
    if _state.grad_enabled:
        for t in tensors:
            if t.requires_grad:
                tape = _active_tape()
                out.requires_grad = True
                out._tape = tape
                out._index = len(tape.records)
                tape.records.append((prim, ctx, tensors, out))
                break
    return out


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict:
    """Reverse sweep from scalar ``loss``.

    Accumulates into ``.grad`` on every ``requires_grad`` leaf seen on the tape
    (and on any extra leaves in ``wrt``) and returns ``{leaf: grad}`` holding
    this sweep's contribution only.  The tape is
    consumed: a second call raises :class:`TapeError`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    leaves: dict[int, Tensor] = {}
    for t in wrt or ():
        leaves[id(t)] = t
    if tape is None:
        if not loss.requires_grad:
            raise TapeError("backward: loss is not on a tape")
        leaves[id(loss)] = loss
        grads = {id(loss): np.ones_like(loss.data)}
    else:
        if tape.consumed:
            raise TapeError("backward: tape already consumed")
        grads = {id(loss): np.ones_like(loss.data)}
        records = tape.records
        for k in range(loss._index, -1, -1):
            prim, ctx, operands, out = records[k]
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in operands)
            ins = prim.backward(ctx, g, needs)
            for t, gi in zip(operands, ins):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t._tape is None:
                    leaves[key] = t
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for k in range(len(records)):
            for t in records[k][2]:
                if t.requires_grad and t._tape is None:
                    leaves.setdefault(id(t), t)
        tape.consumed = True
        tape.clear()
        if _state.tape is tape:
            _state.tape = None
    result = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    return result


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape():
        loss = f(leaf)
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("finite_difference_check: f(x) is not finite")
        if loss._tape is None and not loss.requires_grad:
            analytic = np.zeros_like(base)
        else:
            analytic = backward(loss, wrt=[leaf])[leaf]
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    out = numeric.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            fp = f(Tensor(base.copy())).data
            flat[k] = old - eps
            fm = f(Tensor(base.copy())).data
            flat[k] = old
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise NonFiniteError("finite_difference_check: f is not finite near x")
            out[k] = float(fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# functional front-end
# ---------------------------------------------------------------------------

def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def neg(a):
    return apply_primitive("neg", (a,))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def transpose(a, axes=None):
    return apply_primitive("transpose", (a,), {"axes": None if axes is None else tuple(axes)})


def reshape(a, shape):
    return apply_primitive("reshape", (a,), {"shape": tuple(shape)})


def concat(tensors, axis=0):
    return apply_primitive("concat", tuple(tensors), {"axis": axis})


def stack(tensors, axis=0):
    return apply_primitive("stack", tuple(tensors), {"axis": axis})


def getitem(a, index):
    return apply_primitive("getitem", (a,), {"index": index})


def tanh(a):
    return apply_primitive("tanh", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def log(a):
    return apply_primitive("log", (a,))


def softmax(a, axis=-1):
    return apply_primitive("softmax", (a,), {"axis": axis})


def log_softmax(a, axis=-1):
    return apply_primitive("log_softmax", (a,), {"axis": axis})


def layer_norm(x, gamma, beta, eps=1e-5):
    return apply_primitive("layer_norm", (x, gamma, beta), {"eps": eps})


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return apply_primitive("sum", (a,), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return apply_primitive("mean", (a,), {"axis": axis, "keepdims": keepdims})


def max(a, axis=None, keepdims=False):  # noqa: A001
    return apply_primitive("max", (a,), {"axis": axis, "keepdims": keepdims})


def clip(a, lo=None, hi=None):
    return apply_primitive("clip", (a,), {"lo": lo, "hi": hi})


def max_scalars(scalars: Sequence) -> Tensor:
    """Maximum over a set of scalar tensors; gradient flows to the first argmax."""
    parts = [reshape(as_tensor(s), ()) for s in scalars]
    if not parts:
        raise ShapeError("max_scalars: empty set")
    return max(stack(parts, axis=0))
