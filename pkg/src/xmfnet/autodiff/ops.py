"""Differentiable operations.

Broadcasting is deliberately limited to scalar-vs-tensor. Row-wise bias
and normalization are provided as fused ops (:func:`linear`,
:func:`layer_norm`) so that no general broadcasting rule is needed.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, make_node


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Reduce an upstream grad onto a possibly-scalar operand."""
    return np.asarray(g.sum()) if _is_scalar(t) and g.ndim > 0 else g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return make_node(
        a.data * b.data, (a, b), lambda g: (_fit(g * b.data, a), _fit(g * a.data, b)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _fit(g / b.data, a), _fit(-g * out / b.data, b)

    return make_node(out, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def elementwise(x, kind: str, other=None, *, slope: float = 0.2, factor: float = 1.0) -> Tensor:
    """Dispatch by name; handy for configs and tests."""
    unary = {"relu": relu, "exp": exp, "neg": neg, "tanh": tanh, "abs": abs_, "log": log}
    binary = {"add": add, "mul": mul, "sub": sub, "div": div}
    if kind in unary:
        return unary[kind](x)
    if kind in binary:
        return binary[kind](x, other)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "scale":
        return scale(x, factor)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def row_norm(x) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt(np.einsum("...i,...i->...", x.data, x.data))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        coef = np.where(out > 0, g / safe, 0.0)
        return (x.data * coef[..., None],)

    return make_node(out, (x,), bw, "row_norm")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x[n×i] @ W[i×o] + b[o], the bias added to every row."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape} and {weight.shape} do not agree")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias shape {bias.shape}, expected {(weight.shape[1],)}")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_node(out, parents, bw, "linear")


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def reduce(x, kind: str, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over one axis (or all). Max routes grad to the first argmax."""
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError(f"{kind} over an empty axis")

    def expand(g):
        if axis is None:
            return np.broadcast_to(np.asarray(g).reshape((1,) * x.ndim), x.shape)
        return np.broadcast_to(g if keepdims else np.expand_dims(g, axis), x.shape)

    if kind == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)
        return make_node(out, (x,), lambda g: (expand(g),), "sum")
    if kind == "mean":
        out = x.data.mean(axis=axis, keepdims=keepdims)
        return make_node(out, (x,), lambda g: (expand(g) / n,), "mean")
    if kind == "max":
        if axis is None:
            flat = int(np.argmax(x.data))
            out = x.data.reshape(-1)[flat]
            out = out.reshape((1,) * x.ndim) if keepdims else np.asarray(out)

            def bw_all(g):
                gx = np.zeros(x.data.size)
                gx[flat] = np.asarray(g).reshape(-1)[0]
                return (gx.reshape(x.shape),)

            return make_node(out, (x,), bw_all, "max")
        arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
        out = np.take_along_axis(x.data, arg, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def bw(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, arg, g if keepdims else np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return make_node(out, (x,), bw, "max")
    raise ValueError(f"unknown reduction {kind!r}")


# -- indexing & shape ---------------------------------------------------------

def gather(x, idx) -> Tensor:
    """Select rows ``x[idx]``; backward scatter-adds into the source rows."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {n} rows")

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(x.data[idx], (x,), bw, "gather")


def take(x, key) -> Tensor:
    """General numpy indexing ``x[key]`` with scatter-add backward."""
    x = as_tensor(x)
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return make_node(np.array(out), (x,), bw, "take")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    axis = _norm_axis(axis, tensors[0].ndim)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return make_node(out, tensors, bw, "concat")


def repeat_cols(x, width: int) -> Tensor:
    """Repeat a column vector [n] or [n×1] into [n×width] (outer product with ones)."""
    x = as_tensor(x)
    col = x if x.ndim == 2 else reshape(x, (x.shape[0], 1))
    return matmul(col, Tensor(np.ones((1, width))))


# -- normalization ------------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize every row of a 2-d tensor, then apply a per-feature affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shape mismatch for feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


# -- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(c, kh, kw, ho, wo), strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False
    )
    return win.reshape(c * kh * kw, ho * wo), ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of a [C×H×W] input with [O×C×kh×kw] filters."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    o, c, kh, kw = weight.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None]
        parents.append(bias)
    out = out.reshape(o, ho, wo)

    def bw(g):
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = (w2.T @ g2).reshape(c, kh, kw, ho, wo)
        h, w = x.shape[1:]
        gxp = np.zeros((c, h + 2 * padding, w + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return make_node(out, parents, bw, "conv2d")
