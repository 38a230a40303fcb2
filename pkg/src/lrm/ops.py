"""Differentiable primitives.

Binary elementwise ops accept operands of identical shape, a scalar operand,
an operand whose shape is a trailing suffix of the other's (a bias broadcast
over leading batch dims), or equal-rank operands where one side has size 1
along reduced axes (``keepdims`` results). Anything else is a shape error;
reshape explicitly instead.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, make_node

GELU_K = 0.7978845608  # sqrt(2 / pi)
GELU_C = 0.044715


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if len(sa) == len(sb):
        if all(x == y or x == 1 for x, y in zip(sa, sb)) or all(x == y or y == 1 for x, y in zip(sa, sb)):
            return
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    if lead > 0:
        return g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_prep(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, op)
    return a, b


# -- elementwise arithmetic ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "add")
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "sub")
    out = a.data - b.data
    return make_node(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _reduce_to(g / bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -- activations -------------------------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_node(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_K * (x + GELU_C * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return make_node(out, (a,), bw, "gelu")


# -- linear algebra and reductions ---------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch dims must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ValueError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_node(ad @ bd, (a, b), bw, "matmul")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Cumulative sum; ``exclusive`` drops the current element (starts at 0)."""
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = out - a.data

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g if exclusive else rev,)

    return make_node(out.astype(a.dtype), (a,), bw, "cumsum")


# -- shape ops ----------------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return make_node(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index], copy=True)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(out, (a,), bw, "getitem")


def permute_rows(a, perm: np.ndarray) -> Tensor:
    """Reorder the first axis by a permutation (cheap inverse in backward)."""
    a = as_tensor(a)
    perm = np.asarray(perm)
    n = a.shape[0]
    if perm.shape != (n,) or np.bincount(perm, minlength=n).max(initial=0) > 1:
        raise ValueError("permute_rows needs a permutation of the first axis")

    def bw(g):
        out = np.empty_like(g)
        out[perm] = g
        return (out,)

    return make_node(a.data[perm], (a,), bw, "permute_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

    return make_node(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(ts)))

    return make_node(out, ts, bw, "stack")


# -- fused normalization ---------------------------------------------------------------
def softmax(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (a,), bw, "softmax")


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with biased variance (PyTorch semantics)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    d = x.shape[-1]
    parents = [x]
    if weight is not None:
        weight = as_tensor(weight)
        if weight.shape != (d,):
            raise ValueError(f"layer_norm weight shape {weight.shape} != ({d},)")
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d,):
            raise ValueError(f"layer_norm bias shape {bias.shape} != ({d},)")
        parents.append(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = []
        dxhat = g * weight.data if weight is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads.append(dx)
        lead = tuple(range(g.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make_node(out.astype(xd.dtype), parents, bw, "layer_norm")


# -- sampling ---------------------------------------------------------------------------
def _grid_coords(coord: np.ndarray, size: int):
    """Map [-1, 1] to texel space (corner texel centers at +/-1), clamped."""
    pos = (coord + 1.0) * 0.5 * (size - 1)
    inside = (pos >= 0) & (pos <= size - 1)
    pos = np.clip(pos, 0, size - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(size - 2, 0))
    frac = pos - i0
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, frac, inside


def bilinear_grid_sample(plane, uv) -> Tensor:
    """Bilinearly sample ``plane`` [H, W, d] at ``uv`` [N, 2].

    ``uv[:, 0]`` runs along W (columns), ``uv[:, 1]`` along H (rows). The
    values -1 and +1 hit the centers of the border texels; coordinates outside
    that range clamp to the border, with zero gradient to ``uv``.
    """
    plane, uv = as_tensor(plane), as_tensor(uv)
    if plane.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise ValueError(f"grid sample expects [H,W,d] and [N,2], got {plane.shape}, {uv.shape}")
    H, W, d = plane.shape
    N = uv.shape[0]
    P = plane.data
    u, v = uv.data[:, 0], uv.data[:, 1]
    x0, x1, fx, in_x = _grid_coords(u, W)
    y0, y1, fy, in_y = _grid_coords(v, H)
    # interpolation as a sparse [N, H*W] matrix with 4 weights per row
    cols = np.stack([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1], axis=1).ravel()
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1).ravel()
    interp = sp.csr_matrix((wts.astype(P.dtype), cols, np.arange(0, 4 * N + 1, 4)), shape=(N, H * W))
    out = np.asarray(interp @ P.reshape(H * W, d))

    def bw(g):
        gplane = None
        if plane.requires_grad:
            gplane = np.asarray(interp.T @ g).reshape(H, W, d)
        guv = None
        if uv.requires_grad:
            fx_ = fx[:, None].astype(P.dtype)
            fy_ = fy[:, None].astype(P.dtype)
            f00, f01, f10, f11 = P[y0, x0], P[y0, x1], P[y1, x0], P[y1, x1]
            top = f00 + (f01 - f00) * fx_
            bot = f10 + (f11 - f10) * fx_
            dfx = (f01 - f00) * (1 - fy_) + (f11 - f10) * fy_
            gu = (g * dfx).sum(axis=1) * 0.5 * (W - 1) * in_x
            gv = (g * (bot - top)).sum(axis=1) * 0.5 * (H - 1) * in_y
            guv = np.stack([gu, gv], axis=1).astype(uv.dtype)
        return gplane, guv

    return make_node(out, (plane, uv), bw, "grid_sample")


def transposed_conv2d(x, kernel, stride: int) -> Tensor:
    """Non-overlapping transposed convolution (kernel size == stride).

    ``x`` is [..., C_in, H, W], ``kernel`` is [C_in, C_out, s, s]; the result
    is [..., C_out, s*H, s*W].
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride not in (2, 4):
        raise ValueError(f"stride must be 2 or 4, got {stride}")
    if kernel.ndim != 4 or kernel.shape[2:] != (stride, stride):
        raise ValueError(f"kernel shape {kernel.shape} must be [C_in, C_out, {stride}, {stride}]")
    if x.ndim < 3 or x.shape[-3] != kernel.shape[0]:
        raise ValueError(f"input channels of {x.shape} do not match kernel {kernel.shape}")
    lead = x.shape[:-3]
    C_in, H, W = x.shape[-3:]
    C_out = kernel.shape[1]
    s = stride
    xd = x.data.reshape(-1, C_in, H, W)
    kd = kernel.data
    # y[b, o, h, a, w, c] = sum_i x[b, i, h, w] k[i, o, a, c]
    y = np.einsum("bihw,ioac->bohawc", xd, kd, optimize=True)
    out = np.ascontiguousarray(y).reshape(*lead, C_out, H * s, W * s)

    def bw(g):
        gr = g.reshape(-1, C_out, H, s, W, s)
        gx = np.einsum("bohawc,ioac->bihw", gr, kd, optimize=True).reshape(x.shape) if x.requires_grad else None
        gk = np.einsum("bihw,bohawc->ioac", xd, gr, optimize=True) if kernel.requires_grad else None
        return gx, gk

    return make_node(out, (x, kernel), bw, "transposed_conv2d")


# -- conveniences built from primitives ------------------------------------------------
def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y
