"""Layers built on the tensor engine.

Modules are plain objects; anything assigned as an attribute that is a
Tensor with requires_grad=True is a parameter, and nested Module /
ModuleList attributes are traversed recursively. Persistent non-learnable
state (running stats, router bias) goes through register_buffer. Attribute
insertion order fixes the parameter order, which keeps checkpoint layouts
and optimizer traversal deterministic.

Init policy: linear weights ~ truncated normal (std 0.02, cut at 2 std),
biases zero, norm gains one. Layers that need something else (halting bias,
injection gain) override after construction.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import RngState
from .tensor import Tensor


class Module:
    def _entries(self):
        for name, value in self.__dict__.items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def register_buffer(self, name: str, array: np.ndarray, countable: bool = False):
        if not hasattr(self, "_buffers"):
            self._buffers = {}
        self._buffers[name] = countable
        setattr(self, "_buf_" + name, np.asarray(array))

    def get_buffer(self, name: str) -> np.ndarray:
        return getattr(self, "_buf_" + name)

    def set_buffer(self, name: str, array: np.ndarray) -> None:
        setattr(self, "_buf_" + name, np.asarray(array))

    def named_buffers(self, prefix: str = ""):
        for name, countable in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", self.get_buffer(name), countable
        for name, value in self._entries():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def named_state(self, prefix: str = ""):
        """Everything a checkpoint persists: parameters then buffers."""
        for name, p in self.named_parameters(prefix):
            yield name, p.data
        for name, b, _ in self.named_buffers(prefix):
            yield name, b

    def state_index(self):
        return dict(self.named_state())


class ModuleList(Module):
    def __init__(self, mods=()):
        mods = list(mods)
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
        self._n = len(mods)

    def __len__(self):
        return self._n

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __getitem__(self, i):
        return getattr(self, str(range(self._n)[i]))

    def append(self, mod):
        setattr(self, str(self._n), mod)
        self._n += 1


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: RngState, bias: bool = True):
        self.weight = Tensor(rng.trunc_normal((in_dim, out_dim), std=0.02), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / T.sqrt(var + self._eps)
        return normed * self.gain + self.shift


class BatchNorm(Module):
    """Normalizes over every axis except channel axis 1.

    Training uses batch statistics; eval is a pure affine map through the
    running estimates (momentum 0.1, biased variance on both paths).
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=T.default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=T.default_dtype()))
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        axes = (0,) + tuple(range(2, x.ndim))
        view = (1, -1) + (1,) * (x.ndim - 2)
        if train:
            mu = x.mean(axis=axes, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            y = centered / T.sqrt(var + self._eps)
            m = self._momentum
            self.set_buffer(
                "running_mean",
                (1 - m) * self.get_buffer("running_mean") + m * mu.data.reshape(-1),
            )
            self.set_buffer(
                "running_var",
                (1 - m) * self.get_buffer("running_var") + m * var.data.reshape(-1),
            )
        else:
            mu = T.constant(self.get_buffer("running_mean").reshape(view), like=x)
            var = T.constant(self.get_buffer("running_var").reshape(view), like=x)
            y = (x - mu) / T.sqrt(var + self._eps)
        return y * self.gain.reshape(view) + self.shift.reshape(view)


def dropout(x: Tensor, p: float, train: bool, rng: RngState | None) -> Tensor:
    """Inverted dropout: keep mass is rescaled so E[out] = in."""
    if not train or p <= 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * T.constant(keep, like=x)


def drop_path(x: Tensor, p: float, train: bool, rng: RngState | None) -> Tensor:
    """Drops the whole residual branch per sample (axis 0), rescaled."""
    if not train or p <= 0.0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    keep = (rng.uniform(shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * T.constant(keep, like=x)


class MultiHeadAttention(Module):
    """Bidirectional multi-head self-attention over the token axis."""

    def __init__(self, dim: int, heads: int, rng: RngState, attn_dropout: float = 0.0):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.qkv = Linear(dim, 3 * dim, rng.spawn("qkv"))
        self.proj = Linear(dim, dim, rng.spawn("proj"))
        self._heads = heads
        self._head_dim = dim // heads
        self._scale = 1.0 / math.sqrt(self._head_dim)
        self._attn_dropout = attn_dropout

    def __call__(self, x: Tensor, train: bool = False, rng: RngState | None = None) -> Tensor:
        b, n, d = x.shape
        h, hd = self._heads, self._head_dim
        qkv = self.qkv(x).reshape(b, n, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # each (b, h, n, hd)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * self._scale
        attn = T.softmax(scores, axis=-1)
        attn = dropout(attn, self._attn_dropout, train, rng)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class SwiGLU(Module):
    """(x W_gate) * silu(x W_up) W_down, bias-free.

    Default hidden width is round(8/3 * dim), which keeps the three-matrix
    block roughly parameter-matched to a classic 4x MLP.
    """

    def __init__(self, dim: int, rng: RngState, hidden: int | None = None, out_dim: int | None = None):
        hidden = int(round(8.0 * dim / 3.0)) if hidden is None else hidden
        self.gate = Linear(dim, hidden, rng.spawn("gate"), bias=False)
        self.up = Linear(dim, hidden, rng.spawn("up"), bias=False)
        self.down = Linear(hidden, out_dim if out_dim is not None else dim, rng.spawn("down"), bias=False)
        self.hidden = hidden

    def __call__(self, x: Tensor, train: bool = False, rng: RngState | None = None) -> Tensor:
        return self.down(self.gate(x) * T.silu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + ffn(LN(x)).

    The FFN slot accepts any module with the (x, train, rng) call signature,
    which is how the mixture-of-experts variant slots in.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: RngState,
        ffn: Module | None = None,
        dropout_p: float = 0.0,
        drop_path_p: float = 0.0,
    ):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng.spawn("attn"), attn_dropout=dropout_p)
        self.norm2 = LayerNorm(dim)
        self.ffn = ffn if ffn is not None else SwiGLU(dim, rng.spawn("ffn"))
        self._dropout_p = dropout_p
        self._drop_path_p = drop_path_p

    def __call__(self, x: Tensor, train: bool = False, rng: RngState | None = None) -> Tensor:
        a = self.attn(self.norm1(x), train, rng)
        a = dropout(a, self._dropout_p, train, rng)
        x = x + drop_path(a, self._drop_path_p, train, rng)
        f = self.ffn(self.norm2(x), train, rng)
        f = dropout(f, self._dropout_p, train, rng)
        return x + drop_path(f, self._drop_path_p, train, rng)
