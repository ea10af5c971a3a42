"""Minimal tape-based reverse-mode autodiff over numpy arrays.

Conventions fixed here and relied on everywhere else:

* Precision is a global mode: float64 for verification work, float32 for
  training. `set_default_dtype` / `using_dtype` flip the mode; every Tensor
  constructed afterwards uses it. Ops never silently promote.
* Broadcasting aligns trailing dimensions only (numpy semantics): missing
  leading dims are padded with 1s, and a dim may only stretch if it equals 1.
* Recording is opt-in. Ops append to the innermost active Tape when any
  input requires grad; with no tape active, forward math runs bare.
* `Tape.backward(loss)` walks the recorded ops in reverse and assigns `.grad`
  on every reachable requires-grad leaf. A second backward, or a backward
  into leaves still holding grads, raises TapeError: zero grads first.
* Every forward op checks its output for NaN/Inf and raises NumericError
  instead of letting poison propagate (toggle with `set_check_finite`).
* max-reductions break ties toward the first (lowest) index, in gradient
  routing as well as in values.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as _special

from .errors import DomainError, NumericError, ShapeError, TapeError

_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True
_TAPE_STACK: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
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


def set_check_finite(flag: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"op '{op}' produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; definitions live in the op functions below
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

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh_(self)

    def clamp_max(self, cap):
        return clamp_max(self, cap)

    def clamp_min(self, floor):
        return clamp_min(self, floor)

    def softmax(self, axis=-1):
        return softmax(self, axis)


class _Node:
    __slots__ = ("inputs", "output", "backward", "name")

    def __init__(self, inputs, output, backward, name):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of ops; execution order is the topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise TapeError("backward was already called on this tape")
        self._used = True
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        produced = {id(node.output) for node in self._nodes}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.output), None)
            holders.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, gt in zip(node.inputs, node.backward(g)):
                if gt is None or not tensor.requires_grad:
                    continue
                if gt.shape != tensor.data.shape:
                    raise ShapeError(
                        f"backward of '{node.name}' produced grad shape {gt.shape} "
                        f"for input shape {tensor.data.shape}"
                    )
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
                    holders[key] = tensor
        for key, g in grads.items():
            leaf = holders[key]
            if key in produced:
                continue
            if leaf.grad is not None:
                raise TapeError(
                    "leaf already holds a gradient; call zero_grad before the next backward"
                )
            leaf.grad = g


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _record(name, out_data, inputs, backward) -> Tensor:
    _check_finite(out_data, name)
    tape = active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    if requires:
        tape._nodes.append(_Node(tuple(inputs), out, backward, name))
    return out


def _coerce(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(value, dtype=dtype), False)


def _validate_broadcast(sa, sb, name):
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"op '{name}': shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops


def _binary(name, a, b, fwd, bwd_a, bwd_b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _validate_broadcast(a.data.shape, b.data.shape, name)
    out_data = fwd(a.data, b.data)

    def backward(g):
        ga = bwd_a(g, a.data, b.data, out_data)
        gb = bwd_b(g, a.data, b.data, out_data)
        return (
            None if ga is None else _unbroadcast(ga, a.data.shape),
            None if gb is None else _unbroadcast(gb, b.data.shape),
        )

    return _record(name, out_data, (a, b), backward)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x
    )


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
    )


# ---------------------------------------------------------------------------
# elementwise unary ops


def _unary(name, x, fwd, bwd):
    x = _coerce(x)
    with np.errstate(over="ignore", invalid="ignore"):  # finiteness checked in _record
        out_data = fwd(x.data)

    def backward(g):
        return (bwd(g, x.data, out_data),)

    return _record(name, out_data, (x,), backward)


def neg(x):
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x):
    x = _coerce(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sqrt(x):
    x = _coerce(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt requires non-negative input")
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: g * 0.5 / o)


def absolute(x):
    return _unary("abs", x, np.abs, lambda g, v, o: g * np.sign(v))


def _sigmoid_data(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid_data, lambda g, v, o: g * o * (1.0 - o))


def silu(x):
    def bwd(g, v, o):
        s = _sigmoid_data(v)
        return g * (s + v * s * (1.0 - s))

    return _unary("silu", x, lambda v: v * _sigmoid_data(v), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    def fwd(v):
        return 0.5 * v * (1.0 + _special.erf(v * _INV_SQRT2))

    def bwd(g, v, o):
        cdf = 0.5 * (1.0 + _special.erf(v * _INV_SQRT2))
        pdf = np.exp(-0.5 * v * v) * _INV_SQRT2PI
        return g * (cdf + v * pdf)

    return _unary("gelu", x, fwd, bwd)


def tanh_(x):
    return _unary("tanh", x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def clamp_max(x, cap: float):
    cap = float(cap)
    return _unary(
        "clampmax",
        x,
        lambda v: np.minimum(v, cap),
        lambda g, v, o: g * (v <= cap),
    )


def clamp_min(x, floor: float):
    floor = float(floor)
    return _unary(
        "clampmin",
        x,
        lambda v: np.maximum(v, floor),
        lambda g, v, o: g * (v >= floor),
    )


def softmax(x, axis: int = -1):
    """Stable softmax: subtract the max before exponentiating."""
    x = _coerce(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _record("softmax", out_data, (x,), backward)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    _validate_broadcast(a.data.shape[:-2], b.data.shape[:-2], "matmul")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        ga = _unbroadcast_batch(ga, a.data.shape)
        gb = _unbroadcast_batch(gb, b.data.shape)
        return ga, gb

    return _record("matmul", out_data, (a, b), backward)


def _unbroadcast_batch(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    x = _coerce(x)
    axis = _norm_axis(axis, x.data.ndim)
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand_reduced(g, x.data.shape, axis, keepdims),)

    return _record("sum", out_data, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = _coerce(x)
    axis = _norm_axis(axis, x.data.ndim)
    if axis is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in axis]))
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims) / count

    def backward(g):
        return (_expand_reduced(g, x.data.shape, axis, keepdims) / count,)

    return _record("mean", out_data, (x,), backward)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def reduce_max(x, axis=None, keepdims=False):
    """Max reduction; ties route the gradient to the first (lowest) index."""
    x = _coerce(x)
    axis_n = _norm_axis(axis, x.data.ndim)
    if axis_n is not None and len(axis_n) != 1:
        raise ShapeError("reduce_max supports a single axis or all axes")
    out_data = np.max(x.data, axis=axis_n, keepdims=keepdims)

    def backward(g):
        mask = np.zeros_like(x.data)
        if axis_n is None:
            idx = np.unravel_index(np.argmax(x.data), x.data.shape)
            mask[idx] = 1.0
            return (mask * g,)
        ax = axis_n[0]
        idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
        np.put_along_axis(mask, idx, 1.0, axis=ax)
        gg = g if keepdims else np.expand_dims(g, ax)
        return (mask * gg,)

    return _record("max", out_data, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    x = _coerce(x)
    out_data = np.reshape(x.data, shape)

    def backward(g):
        return (np.reshape(g, x.data.shape),)

    return _record("reshape", out_data, (x,), backward)


def transpose(x, axes):
    x = _coerce(x)
    axes = tuple(a % x.data.ndim for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation")
    inv = np.argsort(axes)
    out_data = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _record("transpose", out_data, (x,), backward)


def concat(tensors, axis: int = 0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].data.ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            pieces.append(g[tuple(key)])
        return tuple(pieces)

    return _record("concat", out_data, tuple(tensors), backward)


def getitem(x, key):
    x = _coerce(x)
    _validate_key(key)
    out_data = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _record("slice", out_data, (x,), backward)


def _validate_key(key):
    items = key if isinstance(key, tuple) else (key,)
    for item in items:
        if not isinstance(item, (int, np.integer, slice)) and item is not Ellipsis:
            raise ShapeError("only basic indexing (ints, slices, ellipsis) is supported")


def split(x, sections: int, axis: int = 0):
    x = _coerce(x)
    axis = axis % x.data.ndim
    n = x.data.shape[axis]
    if n % sections != 0:
        raise ShapeError(f"cannot split axis of size {n} into {sections} equal parts")
    step = n // sections
    outs = []
    for i in range(sections):
        key = [slice(None)] * x.data.ndim
        key[axis] = slice(i * step, (i + 1) * step)
        outs.append(getitem(x, tuple(key)))
    return outs


def pad(x, pad_width):
    """Zero padding; pad_width follows numpy's ((before, after), ...) form."""
    x = _coerce(x)
    pad_width = tuple((int(b), int(a)) for b, a in pad_width)
    if len(pad_width) != x.data.ndim:
        raise ShapeError("pad_width must list (before, after) for every axis")
    out_data = np.pad(x.data, pad_width)

    def backward(g):
        key = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, x.data.shape))
        return (g[key],)

    return _record("pad", out_data, (x,), backward)


# ---------------------------------------------------------------------------
# constructors and checks


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def constant(arr, like: Tensor | None = None) -> Tensor:
    """Non-differentiable tensor (masks, tables) in the working dtype."""
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(arr, dtype=dtype), False)


def gradcheck(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild the scalar loss from scratch on every call; params are
    perturbed in place one coordinate at a time. Relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("gradcheck eps must be positive")
    params = list(params)
    zero_grad(params)
    tape = Tape()
    with tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError("gradcheck objective must be scalar")
    tape.backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    zero_grad(params)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
