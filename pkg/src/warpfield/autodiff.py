"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive records a node holding its parents, a vector-Jacobian rule
used by :func:`backward`, and a tangent rule used by :func:`jvp`.  Tangent
rules are written with the same primitives, so a forward-mode directional
derivative is itself recorded on the tape and can be differentiated with an
ordinary backward sweep (this is how the divergence penalty gets parameter
gradients without double-backward support).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "GradientMap",
    "NonFiniteGradientError",
    "as_diff",
    "parameter",
    "constant",
    "detach",
    "backward",
    "grad",
    "jvp",
    "check_gradients",
    "no_grad",
    "enable_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "sum",
    "mean",
    "broadcast_to",
    "concat",
    "reshape",
    "power",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "absolute",
    "sqrt",
    "clamp",
    "cumsum",
    "take_rows",
]

_ids = itertools.count()


def _rebuild_leaf(values, requires_grad, detached):
    return DiffArray(values, requires_grad, detached=detached)


_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; results are constants."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


@contextlib.contextmanager
def enable_grad():
    global _recording
    prev, _recording = _recording, True
    try:
        yield
    finally:
        _recording = prev


class NonFiniteGradientError(FloatingPointError):
    """Raised when a backward sweep produces NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite gradient produced by primitive '{op}'")


class DiffArray:
    """A dense real array that optionally records how it was computed.

    Leaves created with ``requires_grad=True`` are parameters.  Any result of
    a primitive with at least one tracked input is itself tracked and keeps
    references to its parents; results of untracked inputs are plain
    constants.
    """

    __slots__ = ("values", "requires_grad", "detached", "op", "id", "_parents", "_vjp", "_tangent")
    __array_priority__ = 100.0

    def __init__(self, values, requires_grad: bool = False, *, detached: bool = False, op: str = "leaf"):
        self.values = np.asarray(values)
        if self.values.dtype.kind != "f":
            self.values = self.values.astype(np.float64)
        self.requires_grad = requires_grad
        self.detached = detached
        self.op = op
        self.id = next(_ids)
        self._parents: tuple[DiffArray, ...] = ()
        self._vjp = None
        self._tangent = None

    def __reduce__(self):
        # pickled/copied arrays become fresh leaves; ids are only unique within a process
        return (_rebuild_leaf, (self.values, self.requires_grad, self.detached))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    @property
    def T(self) -> DiffArray:
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> DiffArray:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> DiffArray:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> DiffArray:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradientMap(dict):
    """Mapping node-id -> gradient array.

    Indexing with a :class:`DiffArray` leaf returns its gradient, or zeros of
    the leaf's shape when the leaf was unreachable from the loss.
    """

    def __getitem__(self, key):
        if isinstance(key, DiffArray):
            found = dict.get(self, key.id)
            return np.zeros_like(key.values) if found is None else found
        return dict.__getitem__(self, key)

    def __contains__(self, key):
        if isinstance(key, DiffArray):
            key = key.id
        return dict.__contains__(self, key)


def as_diff(x, dtype=None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    arr = np.asarray(x, dtype=dtype)
    return DiffArray(arr)


def parameter(values, dtype=np.float64) -> DiffArray:
    return DiffArray(np.array(values, dtype=dtype), requires_grad=True)


def constant(values, dtype=None) -> DiffArray:
    return DiffArray(np.asarray(values, dtype=dtype))


def detach(x) -> DiffArray:
    """Same values, no gradient: the result is a constant to everything downstream."""
    x = as_diff(x)
    return DiffArray(x.values, detached=True, op="detach")


def _pair(a, b) -> tuple[DiffArray, DiffArray]:
    """Wrap operands; plain constants adopt the dtype of the recorded partner."""
    if isinstance(a, DiffArray) and not isinstance(b, DiffArray):
        return a, DiffArray(np.asarray(b, dtype=a.dtype))
    if isinstance(b, DiffArray) and not isinstance(a, DiffArray):
        return DiffArray(np.asarray(a, dtype=b.dtype)), b
    return as_diff(a), as_diff(b)


def _vals(x):
    return x.values if isinstance(x, DiffArray) else x


def _make(values, parents: Sequence, vjp, tangent, op: str) -> DiffArray:
    out = DiffArray(values, op=op)
    if not _recording:
        return out
    tracked = tuple(p for p in parents if isinstance(p, DiffArray) and p.tracked)
    if tracked:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._tangent = tangent
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tan_sum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


# ---------------------------------------------------------------- primitives


def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    out_shape = np.broadcast_shapes(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def tangent(ta, tb):
        t = _tan_sum(ta, tb)
        return broadcast_to(t, out_shape) if t.shape != out_shape else t

    return _make(a.values + b.values, (a, b), vjp, tangent, "add")


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    out_shape = np.broadcast_shapes(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    def tangent(ta, tb):
        t = ta if tb is None else (neg(tb) if ta is None else sub(ta, tb))
        return broadcast_to(t, out_shape) if t.shape != out_shape else t

    return _make(a.values - b.values, (a, b), vjp, tangent, "sub")


def neg(a) -> DiffArray:
    a = as_diff(a)
    return _make(-a.values, (a,), lambda g: (-g,), lambda ta: neg(ta), "neg")


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    out_shape = np.broadcast_shapes(a.shape, b.shape)

    def vjp(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.tracked else None
        gb = _unbroadcast(g * a.values, b.shape) if b.tracked else None
        return ga, gb

    def tangent(ta, tb):
        t = _tan_sum(None if ta is None else mul(ta, b), None if tb is None else mul(a, tb))
        return broadcast_to(t, out_shape) if t.shape != out_shape else t

    return _make(a.values * b.values, (a, b), vjp, tangent, "mul")


def div(a, b) -> DiffArray:
    a, b = _pair(a, b)
    out_values = a.values / b.values
    out_shape = out_values.shape
    out: DiffArray

    def vjp(g):
        ga = _unbroadcast(g / b.values, a.shape) if a.tracked else None
        gb = _unbroadcast(-g * out_values / b.values, b.shape) if b.tracked else None
        return ga, gb

    def tangent(ta, tb):
        num = ta
        if tb is not None:
            num = neg(mul(out, tb)) if num is None else sub(num, mul(out, tb))
        t = div(num, b)
        return broadcast_to(t, out_shape) if t.shape != out_shape else t

    out = _make(out_values, (a, b), vjp, tangent, "div")
    return out


def matmul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def vjp(g):
        ga = g @ b.values.T if a.tracked else None
        gb = a.values.T @ g if b.tracked else None
        return ga, gb

    def tangent(ta, tb):
        return _tan_sum(None if ta is None else matmul(ta, b), None if tb is None else matmul(a, tb))

    return _make(a.values @ b.values, (a, b), vjp, tangent, "matmul")


def linear(x, weight, bias) -> DiffArray:
    """Affine map ``x @ weight + bias`` for x (N, in), weight (in, out), bias (out,)."""
    x, weight, bias = as_diff(x), as_diff(weight), as_diff(bias)

    def vjp(g):
        gx = g @ weight.values.T if x.tracked else None
        gw = x.values.T @ g if weight.tracked else None
        gb = g.sum(axis=0) if bias.tracked else None
        return gx, gw, gb

    def tangent(tx, tw, tb):
        out = None if tx is None else matmul(tx, weight)
        if tw is not None:
            out = _tan_sum(out, matmul(x, tw))
        if tb is not None:
            out = _tan_sum(out, broadcast_to(tb, (x.shape[0], weight.shape[1])))
        return out

    values = x.values @ weight.values
    values += bias.values
    return _make(values, (x, weight, bias), vjp, tangent, "linear")


def transpose(a) -> DiffArray:
    a = as_diff(a)
    return _make(a.values.T, (a,), lambda g: (g.T,), lambda ta: transpose(ta), "transpose")


def sum(a, axis=None, keepdims: bool = False) -> DiffArray:  # noqa: A001 - mirrors numpy
    a = as_diff(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g, shape),)

    return _make(
        np.sum(a.values, axis=axis, keepdims=keepdims),
        (a,),
        vjp,
        lambda ta: sum(ta, axis=axis, keepdims=keepdims),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape) -> DiffArray:
    a = as_diff(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(
        np.broadcast_to(a.values, shape),
        (a,),
        lambda g: (_unbroadcast(g, a.shape),),
        lambda ta: broadcast_to(ta, shape),
        "broadcast",
    )


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    shape = tuple(shape)
    return _make(
        a.values.reshape(shape),
        (a,),
        lambda g: (g.reshape(a.shape),),
        lambda ta: reshape(ta, shape),
        "reshape",
    )


def concat(arrays: Sequence, axis: int = -1) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    def tangent(*ts):
        if all(t is None for t in ts):
            return None
        parts = [
            t if t is not None else constant(np.zeros(x.shape, dtype=x.dtype))
            for t, x in zip(ts, arrays)
        ]
        return concat(parts, axis=axis)

    return _make(np.concatenate([x.values for x in arrays], axis=axis), arrays, vjp, tangent, "concat")


def getitem(a, index) -> DiffArray:
    """Basic slicing and integer-array indexing; repeated indices accumulate."""
    a = as_diff(a)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.values[index], (a,), vjp, lambda ta: getitem(ta, index), "slice")


def take_rows(table, rows) -> DiffArray:
    """Gather rows of a 2-D table by integer index (e.g. per-ray latent codes)."""
    table = as_diff(table)
    rows = np.asarray(rows, dtype=np.int64)
    n, d = table.shape

    def vjp(g):
        flat = (rows[:, None] * d + np.arange(d)).ravel()
        return (np.bincount(flat, weights=g.ravel(), minlength=n * d).reshape(n, d).astype(g.dtype),)

    return _make(table.values[rows], (table,), vjp, lambda ta: take_rows(ta, rows), "gather")


def exp(a) -> DiffArray:
    a = as_diff(a)
    values = np.exp(a.values)
    out: DiffArray
    out = _make(values, (a,), lambda g: (g * values,), lambda ta: mul(ta, out), "exp")
    return out


def log(a) -> DiffArray:
    a = as_diff(a)
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,), lambda ta: div(ta, a), "log")


def sin(a) -> DiffArray:
    a = as_diff(a)
    return _make(
        np.sin(a.values), (a,), lambda g: (g * np.cos(a.values),), lambda ta: mul(ta, cos(a)), "sin"
    )


def cos(a) -> DiffArray:
    a = as_diff(a)
    return _make(
        np.cos(a.values), (a,), lambda g: (-g * np.sin(a.values),), lambda ta: neg(mul(ta, sin(a))), "cos"
    )


def tanh(a) -> DiffArray:
    a = as_diff(a)
    values = np.tanh(a.values)
    out: DiffArray

    def tangent(ta):
        return mul(ta, sub(1.0, mul(out, out)))

    out = _make(values, (a,), lambda g: (g * (1.0 - values * values),), tangent, "tanh")
    return out


def _np_sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    values = _np_sigmoid(a.values)
    out: DiffArray

    def tangent(ta):
        return mul(ta, mul(out, sub(1.0, out)))

    out = _make(values, (a,), lambda g: (g * values * (1.0 - values),), tangent, "sigmoid")
    return out


def softplus(a) -> DiffArray:
    a = as_diff(a)
    x = a.values
    values = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(
        values,
        (a,),
        lambda g: (g * _np_sigmoid(x),),
        lambda ta: mul(ta, sigmoid(a)),
        "softplus",
    )


def relu(a) -> DiffArray:
    a = as_diff(a)
    values = np.maximum(a.values, 0)
    mask = None

    def _mask():
        nonlocal mask
        if mask is None:
            mask = values > 0
        return mask

    def tangent(ta):
        return mul(ta, _mask().astype(a.dtype))

    return _make(values, (a,), lambda g: (g * _mask(),), tangent, "relu")


def absolute(a) -> DiffArray:
    a = as_diff(a)
    sign = np.sign(a.values)
    return _make(np.abs(a.values), (a,), lambda g: (g * sign,), lambda ta: mul(ta, sign), "abs")


def sqrt(a) -> DiffArray:
    a = as_diff(a)
    values = np.sqrt(a.values)
    out: DiffArray
    out = _make(
        values, (a,), lambda g: (g * 0.5 / values,), lambda ta: div(mul(ta, 0.5), out), "sqrt"
    )
    return out


def clamp(a, lo=None, hi=None) -> DiffArray:
    a = as_diff(a)
    values = np.clip(a.values, lo, hi)
    inside = np.ones(a.shape, dtype=a.dtype)
    if lo is not None:
        inside = inside * (a.values >= lo)
    if hi is not None:
        inside = inside * (a.values <= hi)
    return _make(values, (a,), lambda g: (g * inside,), lambda ta: mul(ta, inside), "clamp")


def cumsum(a, axis: int = -1) -> DiffArray:
    a = as_diff(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make(np.cumsum(a.values, axis=axis), (a,), vjp, lambda ta: cumsum(ta, axis=axis), "cumsum")


def power(a, exponent) -> DiffArray:
    """``a ** exponent``.

    A constant exponent uses the direct rule.  A recorded exponent is lowered
    to ``exp(exponent * log(a))`` so both base and exponent get gradients;
    the base must then be strictly positive.
    """
    a = as_diff(a)
    if isinstance(exponent, DiffArray) and exponent.tracked:
        return exp(mul(exponent, log(a)))
    p = float(_vals(exponent)) if np.ndim(_vals(exponent)) == 0 else _vals(exponent)
    values = a.values**p

    def vjp(g):
        return (g * p * a.values ** (p - 1),)

    def tangent(ta):
        return mul(ta, mul(p, power(a, p - 1)))

    return _make(values, (a,), vjp, tangent, "pow")


# ---------------------------------------------------------------- sweeps


def _topological(root: DiffArray) -> list[DiffArray]:
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if isinstance(p, DiffArray) and p.tracked and p.id not in seen:
                stack.append((p, False))
    return order


def _sweep(order, loss, check_each: bool) -> GradientMap:
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.values)}
    leaves = GradientMap()
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                leaves[node.id] = g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not isinstance(p, DiffArray) or not p.tracked:
                continue
            if check_each and not np.all(np.isfinite(pg)):
                raise NonFiniteGradientError(node.op)
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return leaves


def backward(loss: DiffArray) -> GradientMap:
    """Gradients of a scalar w.r.t. every reachable ``requires_grad`` leaf.

    Raises ``ValueError`` for non-scalar input and
    :class:`NonFiniteGradientError` naming the primitive that first produced a
    NaN/Inf gradient.
    """
    if not isinstance(loss, DiffArray):
        raise TypeError("backward expects a DiffArray")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.tracked:
        return GradientMap()
    if not np.isfinite(loss.values).all():
        raise NonFiniteGradientError(loss.op, f"loss is non-finite (produced by '{loss.op}')")
    order = _topological(loss)
    leaves = _sweep(order, loss, check_each=False)
    if all(np.isfinite(g).all() for g in leaves.values()):
        return leaves
    # slow diagnostic pass to locate the offending primitive
    _sweep(order, loss, check_each=True)
    raise NonFiniteGradientError("unknown")


def grad(loss: DiffArray, params: Iterable[DiffArray]) -> list[np.ndarray]:
    gm = backward(loss)
    return [gm[p] for p in params]


def jvp(f: Callable[[DiffArray], DiffArray], x, tangent) -> DiffArray:
    """Directional derivative ``J_f(x) @ tangent`` computed forward-mode.

    ``f`` maps points of shape (..., 3) row-wise; ``tangent`` has the shape of
    ``x``.  The tangent computation is recorded, so the returned array stays
    differentiable w.r.t. any parameters used inside ``f``.
    """
    x = as_diff(x)
    tangent = as_diff(tangent, dtype=x.dtype)
    if tangent.shape != x.shape:
        raise ValueError(f"tangent shape {tangent.shape} does not match point shape {x.shape}")
    if not _recording:
        with enable_grad():
            out = jvp(f, x, tangent)
        return DiffArray(out.values, op="jvp")
    if x.tracked:
        seed = _make(x.values, (x,), lambda g: (g,), lambda t: t, "seed")
    else:
        seed = DiffArray(x.values, requires_grad=True, op="seed")
    y = f(seed)
    if not y.tracked:
        return constant(np.zeros(y.shape, dtype=y.dtype))
    tangents: dict[int, DiffArray] = {seed.id: tangent}
    for node in _topological(y):
        if node.id in tangents or not node._parents:
            continue
        parent_t = [tangents.get(p.id) if isinstance(p, DiffArray) else None for p in node._parents]
        if all(t is None for t in parent_t):
            continue
        t = node._tangent(*parent_t)
        if t is not None:
            tangents[node.id] = t
    out = tangents.get(y.id)
    if out is None:
        return constant(np.zeros(y.shape, dtype=y.dtype))
    return out


def check_gradients(f: Callable[[], DiffArray], params: Sequence[DiffArray], eps: float = 1e-5) -> float:
    """Worst relative error between backward gradients and central differences.

    ``f`` re-evaluates the scalar from the current parameter values.  Where
    both the analytic and numeric derivative are below 1e-8 the absolute
    error is used instead.
    """
    loss = f()
    analytic = grad(loss, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(gflat[i])
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) if scale < 1e-8 else abs(a - numeric) / scale
            worst = max(worst, err)
    return worst
