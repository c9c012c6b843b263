"""Differentiable primitives.

Every function here takes and returns :class:`Tensor` objects and records a
backward rule on the active tape.  Broadcasting is deliberately limited to
the "bias" pattern: the smaller operand's shape must be a suffix of the
larger one's, and it is summed back over the leading axes on backward.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, record
from .errors import ConfigError, DimensionError

DIFFERENTIABLE_OPS: dict[str, Callable] = {}


def differentiable(fn: Callable) -> Callable:
    DIFFERENTIABLE_OPS[fn.__name__] = fn
    return fn


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead < 0:
        raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_bias_shapes(a: Tensor, b: Tensor, op: str) -> None:
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not bias-compatible")


@differentiable
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return record(out, (a, b), bw, "add")


@differentiable
def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return record(out, (a, b), bw, "sub")


@differentiable
def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_shapes(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return record(out, (a, b), bw, "mul")


@differentiable
def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return record(a.data * c, (a,), bw, "scale")


@differentiable
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _reduce_to(ga, a.shape),
            None if gb is None else _reduce_to(gb, b.shape),
        )

    return record(out, (a, b), bw, "matmul")


@differentiable
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record(out, inputs, bw, "linear")


@differentiable
def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data * slope)

    def bw(g):
        return (np.where(mask, g, g * slope),)

    return record(out, (x,), bw, "leaky_relu")


@differentiable
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def bw(g):
        return (g * mask,)

    return record(out, (x,), bw, "relu")


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@differentiable
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.data, axis)

    def bw(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return record(y, (x,), bw, "softmax")


@differentiable
def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw, "log_softmax")


@differentiable
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        n = x.shape[-1]
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, _reduce_to(g * xhat, gamma.shape), _reduce_to(g, beta.shape)

    return record(out, (x, gamma, beta), bw, "layer_norm")


@differentiable
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise each channel (last axis) with statistics over all other axes.

    Returns the output plus the batch mean and population variance so that a
    module can update its running estimates.
    """
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    m = flat.shape[0]
    if m < 2:
        raise DimensionError("batch_norm in training mode needs at least 2 values per channel")
    mu = flat.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).reshape(-1, c).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        s1 = gxhat.reshape(-1, c).sum(axis=0)
        s2 = (gxhat * xhat).reshape(-1, c).sum(axis=0)
        gx = inv / m * (m * gxhat - s1 - xhat * s2)
        return gx, _reduce_to(g * xhat, gamma.shape), _reduce_to(g, beta.shape)

    return record(out, (x, gamma, beta), bw, "batch_norm"), mu, var


@differentiable
def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution over axis -2 of a channels-last input.

    ``x`` is (..., T_in, C_in) and ``kernel`` (C_out, C_in, K); the result is
    (..., T_out, C_out) with T_out = (T_in - K) // stride + 1.
    """
    c_out, c_in, k = kernel.shape
    t_in = x.shape[-2]
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv1d: input has {x.shape[-1]} channels, kernel expects {c_in}")
    if stride < 1:
        raise ConfigError("conv1d stride must be >= 1")
    if t_in < k:
        raise DimensionError(f"conv1d: input length {t_in} shorter than kernel {k}")
    t_out = (t_in - k) // stride + 1
    lead = x.shape[:-2]

    if k == stride:
        # Non-overlapping windows: a reshape replaces the sliding view.
        cols = x.data[..., : t_out * k, :].reshape(*lead, t_out, k, c_in)
        cols = np.swapaxes(cols, -1, -2)
    else:
        cols = sliding_window_view(x.data, k, axis=-2)[..., ::stride, :, :][..., :t_out, :, :]
    cols2 = cols.reshape(-1, c_in * k)
    w2 = kernel.data.reshape(c_out, c_in * k)
    out = (cols2 @ w2.T).reshape(*lead, t_out, c_out)
    if bias is not None:
        out = out + bias.data
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gk = (g2.T @ cols2).reshape(c_out, c_in, k) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(*lead, t_out, c_in, k)
            gx = np.zeros_like(x.data)
            if k == stride:
                gx[..., : t_out * k, :] = np.swapaxes(gcols, -1, -2).reshape(*lead, t_out * k, c_in)
            else:
                span = stride * (t_out - 1) + 1
                for j in range(k):
                    gx[..., j : j + span : stride, :] += gcols[..., j]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record(out, inputs, bw, "conv1d")


@differentiable
def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=ax)

    return record(out, tensors, bw, "concat")


@differentiable
def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return [np.take(g, i, axis=ax) for i in range(len(tensors))]

    return record(out, tensors, bw, "stack")


@differentiable
def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], copy=True)

    def bw(g):
        gx = np.zeros_like(x.data)
        if _is_advanced(index):
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return record(out, (x,), bw, "getitem")


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


@differentiable
def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return record(out, (x,), bw, "reshape")


@differentiable
def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = np.ascontiguousarray(np.swapaxes(x.data, a1, a2))

    def bw(g):
        return (np.swapaxes(g, a1, a2),)

    return record(out, (x,), bw, "swapaxes")


@differentiable
def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record(out, (x,), bw, "sum")


@differentiable
def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / n)


@differentiable
def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[n, index[n]]`` for every row of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return record(out, (x,), bw, "pick")


@differentiable
def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, weights: dict, heads: int,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` heads.

    ``q``, ``k``, ``v`` are (..., S, E).  ``weights`` maps ``wq, bq, wk, bk,
    wv, bv, wo, bo`` to projection parameters with (out, in) layout.  The
    per-head scale is 1/sqrt(E/heads).
    """
    e = q.shape[-1]
    if e % heads:
        raise ConfigError(f"embedding dim {e} not divisible by {heads} heads")
    d = e // heads
    lead = q.shape[:-2]

    def split(t: Tensor) -> Tensor:
        s = t.shape[-2]
        return swapaxes(reshape(t, (*lead, s, heads, d)), -2, -3)

    qh = split(linear(q, weights["wq"], weights["bq"]))
    kh = split(linear(k, weights["wk"], weights["bk"]))
    vh = split(linear(v, weights["wv"], weights["bv"]))
    scores = scale(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)
    ctx = reshape(swapaxes(ctx, -2, -3), (*lead, q.shape[-2], e))
    out = linear(ctx, weights["wo"], weights["bo"])
    if return_weights:
        return out, attn.data
    return out


def positional_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal encoding: PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(...)."""
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(dtype)
