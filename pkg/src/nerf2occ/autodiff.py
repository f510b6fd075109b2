"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Tape` records operations in execution order; replaying the records
in reverse propagates gradients through the DAG. Broadcasting is limited to
trailing-dimension alignment. All reductions use numpy's fixed summation
order, so gradients are bitwise reproducible for identical inputs.
"""

from __future__ import annotations

import contextlib
from itertools import zip_longest

import numpy as np

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created without an explicit dtype.

    32-bit is the training default; gradient-check tests switch to 64-bit
    for finite-difference headroom.
    """
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense n-dimensional array participating in the active tape.

    `grad`, when populated, always has the same shape as `data`. Repeated
    backward passes accumulate into `grad` until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # numpy arrays and scalars keep their dtype; python data adopts the default
            dtype = data.dtype if isinstance(data, (np.ndarray, np.generic)) else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node_id = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A constant view of this tensor's current values (no recording)."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        if self._tape is None:
            raise ValueError("tensor is not attached to a tape")
        self._tape.backward(self)

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of operations; reverse replay computes gradients."""

    def __init__(self):
        self._records = []
        self._tensors = []
        self._produced = set()

    def _register(self, t: Tensor) -> int:
        if t._tape is not self:
            t._tape = self
            t._node_id = len(self._tensors)
            self._tensors.append(t)
        return t._node_id

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        in_ids = tuple(self._register(t) for t in inputs)
        out_id = self._register(out)
        self._produced.add(out_id)
        self._records.append((out_id, in_ids, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, root: Tensor) -> None:
        """Populate `grad` on every tensor reachable from `root` that
        requires gradients. Accumulates across repeated calls.
        """
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar-shaped, got shape {root.data.shape}")
        rid = self._register(root)
        scratch = [None] * len(self._tensors)
        scratch[rid] = np.ones_like(root.data)
        for out_id, in_ids, fn in reversed(self._records):
            g = scratch[out_id]
            if g is None:
                continue
            grads = fn(g)
            for nid, gi in zip(in_ids, grads):
                if gi is None:
                    continue
                if scratch[nid] is None:
                    scratch[nid] = gi
                else:
                    scratch[nid] = scratch[nid] + gi
        # publish only to leaves: tensors no op on this tape produced
        # (parameters and constants); intermediates keep grad = None
        for nid, (t, g) in enumerate(zip(self._tensors, scratch)):
            if g is None or not t.requires_grad or nid in self._produced:
                continue
            if t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g


_ACTIVE_TAPE: Tape | None = None


@contextlib.contextmanager
def tape():
    """Activate a fresh tape; ops inside the block are recorded on it."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    t = Tape()
    _ACTIVE_TAPE = t
    try:
        yield t
    finally:
        _ACTIVE_TAPE = prev


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


@contextlib.contextmanager
def no_tape():
    """Suspend recording (for sampling passes that must stay constant)."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev


def _maybe_record(out, inputs, backward_fn):
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.record(out, inputs, backward_fn)
    return out


def _broadcast_check(sa, sb):
    out = []
    for da, db in zip_longest(reversed(sa), reversed(sb), fillvalue=1):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {tuple(sa)} and {tuple(sb)} are not broadcastable")
        out.append(max(da, db))
    return tuple(reversed(out))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` over the axes that broadcasting expanded, back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data - b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data / b.data)
    return _maybe_record(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _maybe_record(out, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python constant (no gradient to the constant)."""
    s = float(s)
    out = Tensor(a.data * s)
    return _maybe_record(out, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _maybe_record(out, (a,), lambda g: (g * y,))


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.data))
    return _maybe_record(out, (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.data))
    return _maybe_record(out, (a,), lambda g: (-g * np.sin(a.data),))


# |x| cap for logistic/softplus: exp(-60) ~ 8.8e-27 keeps outputs strictly
# inside (0, 1) as normal floats (no denormal stalls, no exact saturation)
_EXP_CLAMP = 60.0


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # sigmoid(|x|) via exp of a negative magnitude, reflected for x < 0
    ex = np.exp(-np.minimum(np.abs(x), _EXP_CLAMP))
    s = 1.0 / (1.0 + ex)
    return np.where(x >= 0, s, 1.0 - s)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)
    out = Tensor(y)
    return _maybe_record(out, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|); derivative is the logistic,
    # recovered from the forward value as sigmoid(x) = 1 - exp(-softplus(x))
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.minimum(np.abs(x), _EXP_CLAMP)))
    out = Tensor(y)
    return _maybe_record(out, (a,), lambda g: (g * (1.0 - np.exp(-y)),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _maybe_record(out, (a,), lambda g: (g * (a.data > 0),))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return _maybe_record(out, (a,), lambda g: (g * (2.0 * a.data),))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    # derivative guard so a forward value of exactly 0 yields grad 0 instead of inf
    return _maybe_record(out, (a,), lambda g: (g * (0.5 / np.maximum(y, 1e-12)),))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    return _maybe_record(out, (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    out = Tensor(np.maximum(a.data, floor))
    return _maybe_record(out, (a,), lambda g: (g * (a.data > floor),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "exp": exp, "sin": sin,
    "cos": cos, "sigmoid": sigmoid, "softplus": softplus, "relu": relu,
    "square": square, "scale-by-constant": scale,
}


def elementwise(op_kind: str, *inputs):
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op kind {op_kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# linear algebra / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _maybe_record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _maybe_record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _maybe_record(out, tuple(tensors), backward)


def reduce(op_kind: str, a: Tensor, axis: int | None = None) -> Tensor:
    if op_kind == "sum":
        return tsum(a, axis)
    if op_kind == "mean":
        return tmean(a, axis)
    raise ValueError(f"unknown reduce op kind {op_kind!r}")


def _check_axis(a: Tensor, axis):
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"axis {axis} invalid for shape {a.shape}")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    out = Tensor(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=False),)

    return _maybe_record(out, (a,), backward)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(a, axis)
    out = Tensor(a.data.mean(axis=axis))
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=False),)

    return _maybe_record(out, (a,), backward)


def exclusive_cumprod(a: Tensor) -> Tensor:
    """T_i = prod_{j<i} x_j along the last axis, with T_0 = 1."""
    x = a.data
    shifted = np.concatenate([np.ones_like(x[..., :1]), x[..., :-1]], axis=-1)
    t = np.cumprod(shifted, axis=-1)
    out = Tensor(t)

    def backward(g):
        gt = g * t
        rev = np.cumsum(gt[..., ::-1], axis=-1)[..., ::-1]
        # suffix[k] = sum_{i>k} g_i T_i
        suffix = np.concatenate([rev[..., 1:], np.zeros_like(rev[..., :1])], axis=-1)
        if np.any(x == 0.0):
            return (_cumprod_grad_with_zeros(x, g),)
        return (suffix / x,)

    return _maybe_record(out, (a,), backward)


def _cumprod_grad_with_zeros(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Exact O(N^2) gradient of the exclusive cumprod, safe at zeros."""
    n = x.shape[-1]
    flat_x = x.reshape(-1, n)
    flat_g = g.reshape(-1, n)
    dx = np.zeros_like(flat_x)
    for r in range(flat_x.shape[0]):
        xr, gr = flat_x[r], flat_g[r]
        for k in range(n):
            y = xr.copy()
            y[k] = 1.0
            tk = np.cumprod(np.concatenate([[1.0], y[:-1]]))
            dx[r, k] = np.dot(gr[k + 1:], tk[k + 1:])
    return dx.reshape(x.shape)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the taped gradient of `fn` at `point`
    and central finite differences with the given step.

    `fn` must map a tensor of `point`'s shape to a scalar tensor and be
    free of side effects; it is re-evaluated 2 * point.size + 1 times.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    work = Tensor(point.data.copy(), requires_grad=True)
    with tape() as tp:
        val = fn(work)
        if val.data.size != 1:
            raise ValueError("grad_check target must be scalar-valued")
        if not np.isfinite(val.data).all():
            raise ValueError("grad_check target evaluated to a non-finite value")
        tp.backward(val)
    auto = work.grad if work.grad is not None else np.zeros_like(work.data)

    flat = work.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(Tensor(work.data)).item()
        flat[i] = orig - step
        lo = fn(Tensor(work.data)).item()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(lo)):
            raise ValueError("grad_check target evaluated to a non-finite value")
        fd[i] = (up - lo) / (2.0 * step)
    fd = fd.reshape(work.data.shape)
    denom = np.maximum(1e-8, np.abs(fd))
    return float(np.max(np.abs(auto - fd) / denom))


def grad_check_params(fn, params, step: float = 1e-5) -> float:
    """`grad_check` over a collection of parameter tensors.

    `fn` takes no arguments and closes over `params`; their data is
    perturbed in place for the finite-difference probes.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with tape() as tp:
        val = fn()
        if val.data.size != 1:
            raise ValueError("grad_check target must be scalar-valued")
        if not np.isfinite(val.data).all():
            raise ValueError("grad_check target evaluated to a non-finite value")
        tp.backward(val)

    worst = 0.0
    for p in params:
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            fd[i] = (up - lo) / (2.0 * step)
        fd = fd.reshape(p.data.shape)
        denom = np.maximum(1e-8, np.abs(fd))
        worst = max(worst, float(np.max(np.abs(auto - fd) / denom)))
        p.zero_grad()
    return worst
