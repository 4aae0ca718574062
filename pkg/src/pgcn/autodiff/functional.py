"""Differentiable layer primitives built on :mod:`pgcn.autodiff.tensor`."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from pgcn.errors import DimensionError
from pgcn.autodiff.tensor import DTYPE, Tensor, as_tensor, make_result, matmul, reshape, unbroadcast

NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


# -- pointwise ----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return make_result(np.where(pos, x.data, 0).astype(DTYPE), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)

    def backward(g):
        return (g * y * (1 - y),)

    return make_result(y, (x,), backward, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1 + 0.044715 * x2))
    y = 0.5 * xd * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return make_result(y.astype(DTYPE), (x,), backward, "gelu")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return make_result(y, (x,), backward, "exp")


def tabs(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return make_result(np.abs(x.data), (x,), backward, "abs")


_POINTWISE = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def elementwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch by name: relu, gelu, sigmoid (unary) or add, mul (binary)."""
    if kind in _POINTWISE:
        (x,) = args
        return _POINTWISE[kind](x)
    if kind in ("add", "mul"):
        a, b = (as_tensor(t) for t in args)
        if a.shape != b.shape:
            raise DimensionError(f"{kind}: operand shapes differ, {a.shape} vs {b.shape}")
        return a + b if kind == "add" else a * b
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- softmax & normalization --------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def _normalize(x: Tensor, scale: Tensor, bias: Tensor, axes: tuple[int, ...],
               mu: np.ndarray, var: np.ndarray, param_shape: tuple[int, ...], op: str) -> Tensor:
    rstd = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x.data - mu) * rstd
    sd = scale.data.reshape(param_shape)
    y = xhat * sd + bias.data.reshape(param_shape)
    count = int(np.prod([x.shape[a] for a in axes]))
    reduce_axes = tuple(i for i, n in enumerate(param_shape) if n == 1) if len(param_shape) == x.ndim \
        else tuple(range(x.ndim - len(param_shape)))
    batch_stats = op != "batch_norm_eval"

    def backward(g):
        gs = (g * xhat).sum(axis=reduce_axes).reshape(scale.shape) if scale.requires_grad else None
        gb = g.sum(axis=reduce_axes).reshape(bias.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * sd
            if batch_stats:
                m1 = gxhat.sum(axis=axes, keepdims=True) / count
                m2 = (gxhat * xhat).sum(axis=axes, keepdims=True) / count
                gx = rstd * (gxhat - m1 - xhat * m2)
            else:
                gx = gxhat * rstd
        return gx, gs, gb

    return make_result(y.astype(DTYPE), (x, scale, bias), backward, op)


def layer_norm(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis, then apply ``scale``/``bias``."""
    x, scale, bias = as_tensor(x), as_tensor(scale), as_tensor(bias)
    c = x.shape[-1]
    if scale.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: scale/bias {scale.shape}/{bias.shape} vs last axis {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    return _normalize(x, scale, bias, (x.ndim - 1,), mu, var, (c,), "layer_norm")


def batch_norm(x: Tensor, scale: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over axis 1 of an ``N×C×…`` tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance).  In evaluation mode the running
    buffers are used unchanged.
    """
    x, scale, bias = as_tensor(x), as_tensor(scale), as_tensor(bias)
    if x.ndim < 2:
        raise DimensionError(f"batch_norm: expected N×C×…, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"batch_norm: scale/bias {scale.shape}/{bias.shape} vs channels {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    pshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        n = x.size // c
        unbiased = var.reshape(c) * (n / max(n - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        op = "batch_norm"
    else:
        mu = running_mean.reshape(pshape)
        var = running_var.reshape(pshape)
        op = "batch_norm_eval"
    return _normalize(x, scale, bias, axes, mu, var, pshape, op)


def normalize(kind: str, x: Tensor, scale: Tensor, bias: Tensor, mode: str = "train",
              running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None) -> Tensor:
    if kind == "layer_norm":
        return layer_norm(x, scale, bias)
    if kind == "batch_norm":
        c = as_tensor(x).shape[1]
        if running_mean is None:
            running_mean = np.zeros(c, dtype=DTYPE)
        if running_var is None:
            running_var = np.ones(c, dtype=DTYPE)
        return batch_norm(x, scale, bias, running_mean, running_var, training=(mode == "train"))
    raise ValueError(f"unknown normalization kind {kind!r}")


# -- convolution & pooling ----------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    # → N, OH·OW, C·kh·kw
    return cols.reshape(n, c * kh * kw, oh * ow).transpose(0, 2, 1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.  ``x`` is ``C×H×W`` or ``N×C×H×W``."""
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    n, c, h, w = x.shape
    cout, _, kh, kw = weight.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or oh <= 0 or ow <= 0:
        raise DimensionError(f"conv2d: kernel {weight.shape} gives empty output on input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T  # N, OH·OW, Cout
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    y = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, cout, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(n, cout, oh * ow)  # N, Cout, L
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gm.transpose(1, 0, 2).reshape(cout, -1) @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    result = make_result(y, parents, backward, "conv2d")
    if unbatched:
        return result.reshape(result.shape[1:])
    return result


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k×k`` max pooling on ``N×C×H×W`` (H, W divisible by k)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"max_pool2d: {h}×{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gb,)

    return make_result(y, (x,), backward, "max_pool2d")


# -- losses -------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element (channels included)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    loss = np.array((diff.astype(np.float64) ** 2).sum() / n, dtype=DTYPE)

    def backward(g):
        gp = (2.0 / n) * g * diff
        return gp, (-gp if target.requires_grad else None)

    return make_result(loss, (pred, target), backward, "mse_loss")


# -- resampling ---------------------------------------------------------------

@lru_cache(maxsize=128)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out×n_in`` interpolation matrix, half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1 - t
        m[o, i1] += t
    m.setflags(write=False)
    return m.astype(DTYPE)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (``…×H×W``)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = Tensor(bilinear_matrix(h, out_h))
    rx = Tensor(bilinear_matrix(w, out_w).T.copy())
    return matmul(matmul(ry, x), rx)


def resize_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable bilinear resize of ``…×H×W`` arrays."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return np.asarray(img, dtype=DTYPE)
    return (bilinear_matrix(h, out_h) @ np.asarray(img, dtype=DTYPE) @ bilinear_matrix(w, out_w).T).astype(DTYPE)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis, for any leading shape."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input features {x.shape[-1]} vs weight {weight.shape}")
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    y = matmul(flat, weight)
    if bias is not None:
        y = y + bias
    return y.reshape(lead + (weight.shape[1],)) if x.ndim != 2 else y


__all__ = [
    "relu", "sigmoid", "gelu", "exp", "tabs", "elementwise", "softmax", "layer_norm",
    "batch_norm", "normalize", "conv2d", "max_pool2d", "mse_loss", "bilinear_matrix",
    "resize_bilinear", "resize_array", "linear", "unbroadcast", "NORM_EPS",
]
