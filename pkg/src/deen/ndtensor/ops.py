"""Differentiable operations on :class:`Tensor`.

Every op returns a new tensor; its backward closure returns one gradient per
input (``None`` for inputs that never need one). There is no implicit
broadcasting except the bias add in :func:`linear` and the per-channel affine in
:func:`batchnorm2d`, so shape bugs surface as :class:`DimensionError`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DegenerateBatchError, DimensionError
from . import kernels
from .tensor import Tensor, make_node

# distances at or below this have zero gradient (the subgradient of |v| at 0)
DIST_FLOOR = 1e-12


def _same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("add", x, y)
    return make_node(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("sub", x, y)
    return make_node(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("mul", x, y)
    a, b = x.data, y.data
    return make_node(a * b, (x, y), lambda g: (g * b, g * a), "mul")


def scale(x: Tensor, a: float) -> Tensor:
    return make_node(x.data * a, (x,), lambda g: (g * a,), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    return make_node(x.data + c, (x,), lambda g: (g,), "shift")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def square(x: Tensor) -> Tensor:
    a = x.data
    return make_node(a * a, (x,), lambda g: (2 * a * g,), "square")


# -------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[d] != tensors[0].shape[d] for d in range(nd) if d != ax):
            raise DimensionError(
                f"concat: {t.shape} incompatible with {tensors[0].shape} on axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(tensors))
        )

    return make_node(out, tensors, backward, "concat")


def index(x: Tensor, idx) -> Tensor:
    """Basic or fancy indexing; the backward scatter-adds (``np.add.at``)."""
    out = x.data[idx]
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(out, copy=True), (x,), backward, "index")


# ------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    src_shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW map, giving N x C."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return make_node(out, (x,), backward, "global_avg_pool")


def _pool_matrix(src: int, dst: int, dtype) -> np.ndarray:
    # adaptive average pooling bins: [floor(i*src/dst), ceil((i+1)*src/dst))
    m = np.zeros((dst, src), dtype=dtype)
    for i in range(dst):
        lo = (i * src) // dst
        hi = -((-(i + 1) * src) // dst)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, out_hw: Sequence[int]) -> Tensor:
    """Average-pool an NCHW map down to ``out_hw`` using adaptive bins."""
    n, c, h, w = x.shape
    oh, ow = out_hw
    if oh > h or ow > w:
        raise DimensionError(f"cannot pool {h}x{w} up to {oh}x{ow}")
    if (oh, ow) == (h, w):
        return x
    ph = _pool_matrix(h, oh, x.dtype)
    pw = _pool_matrix(w, ow, x.dtype)
    out = np.einsum("ah,nchw,bw->ncab", ph, x.data, pw, optimize=True)

    def backward(g):
        return (np.einsum("ah,ncab,bw->nchw", ph, g, pw, optimize=True),)

    return make_node(out, (x,), backward, "adaptive_avg_pool2d")


# ------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched (leading dims equal) matrix product."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g)

    return make_node(A @ B, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight stored D x M."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    X, W = x.data, weight.data
    out = X @ W
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return (g @ W.T, X.T @ g, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "linear")


# ---------------------------------------------------------- probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (x,), backward, "log_softmax")


# ------------------------------------------------------------- geometry


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm slices along ``axis``; an all-zero slice maps to zeros."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x.data / safe, 0.0).astype(x.dtype)

    def backward(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(norm > 0, gx, 0.0).astype(x.dtype),)

    return make_node(y, (x,), backward, "l2_normalize")


def euclidean_distance(u: Tensor, v: Tensor) -> Tensor:
    """``sqrt(sum((u - v)**2))`` along the last axis; coincident points get zero gradient."""
    _same_shape("euclidean_distance", u, v)
    diff = u.data - v.data
    d = np.sqrt((diff * diff).sum(axis=-1))

    def backward(g):
        w = np.where(d > DIST_FLOOR, g / np.maximum(d, DIST_FLOOR), 0.0)
        gu = w[..., None] * diff
        return (gu, -gu)

    return make_node(d, (u, v), backward, "euclidean_distance")


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """N x M matrix of :func:`euclidean_distance` between rows of a and b."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distance: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    na, nb = (A * A).sum(axis=1), (B * B).sum(axis=1)
    scale = na[:, None] + nb[None, :]
    sq = scale - 2.0 * (A @ B.T)
    # the expansion cancels badly for near-coincident rows; redo those exactly
    close = sq <= np.sqrt(np.finfo(sq.dtype).eps) * scale
    if close.any():
        i, j = np.nonzero(close)
        diff = A[i] - B[j]
        sq[i, j] = (diff * diff).sum(axis=1)
    d = np.sqrt(np.maximum(sq, 0.0))

    def backward(g):
        wgt = np.where(d > DIST_FLOOR, g / np.maximum(d, DIST_FLOOR), 0.0)
        ga = wgt.sum(axis=1)[:, None] * A - wgt @ B
        gb = wgt.sum(axis=0)[:, None] * B - wgt.T @ A
        return (ga, gb)

    return make_node(d, (a, b), backward, "pairwise_distance")


# --------------------------------------------------------------- conv / bn


def _conv_out(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of an NCHW input with an O x C x KH x KW kernel (no bias).

    Output spatial size is ``floor((H + 2*pad - dilation*(K-1) - 1)/stride) + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OCKK weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {wc}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ContractError("conv2d: need stride >= 1, dilation >= 1, padding >= 0")
    oh = _conv_out(h, kh, stride, padding, dilation)
    ow = _conv_out(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: {h}x{w} input admits no {kh}x{kw} window (dilation {dilation})")

    X = np.ascontiguousarray(x.data)
    W2 = weight.data.reshape(o, c * kh * kw)
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = X.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = kernels.im2col(X, kh, kw, stride, padding, dilation, oh, ow)
    out = (W2 @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(W2.T @ g2)
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                gx = kernels.col2im(gcols, n, c, h, w, kh, kw, stride, padding, dilation, oh, ow)
        return (gx, gw)

    return make_node(out, (x, weight), backward, "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation for NCHW maps or N x C matrices.

    Train mode normalises with the biased batch variance and updates the
    running buffers in place (``running = (1 - momentum) * running +
    momentum * batch``, unbiased variance). Eval mode uses the buffers.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects N x C or NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: scale/shift must be ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c
    X = x.data
    G = gamma.data.reshape(bshape)

    if training:
        if m < 2:
            raise DegenerateBatchError(f"batchnorm in train mode needs N*H*W >= 2, got {m}")
        mu = X.mean(axis=axes, keepdims=True)
        xc = X - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (m / (m - 1))
    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (X - running_mean.reshape(bshape)) * inv_std
    xhat = xhat.astype(x.dtype, copy=False)
    inv_std = inv_std.astype(x.dtype, copy=False)
    out = G * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * G
        if training:
            gx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv_std
        return (gx, gg, gb)

    return make_node(out, (x, gamma, beta), backward, "batchnorm")


# ------------------------------------------------------------------ misc


def dot(u: Tensor, v: Tensor) -> Tensor:
    return sum(mul(u, v))


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix."""
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)
