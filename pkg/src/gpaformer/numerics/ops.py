"""Differentiable operations used by the segmentation network.

Convolutions and volumes use channel-first layout without a batch axis:
``[C, D, H, W]``. Token sequences are ``[N, d]``.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_result(out, (a, b), back, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    def back(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return make_result(x.data ** exponent, (x,), back, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    t = np.tanh(c * (xd + 0.044715 * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return make_result(out, (x,), back, "gelu")


# -- reductions and shape ---------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_result(
        np.transpose(x.data, axes),  # a view; matmul accepts strided operands
        (x,),
        lambda g: (np.transpose(g, inv),),
        "transpose",
    )


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back, "concat")


# -- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched (leading-axis) matrix product."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as ``[d_in, d_out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), back, "softmax")


def matmul_softmax(a: Tensor, b: Tensor) -> Tensor:
    """``softmax(a @ b)`` over the last axis; the logits are normalised in place."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def back(g):
        gl = out * (g - (g * out).sum(axis=-1, keepdims=True))
        ga = gl @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ gl
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), back, "matmul_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V for 2-D or head-batched 3-D operands."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    # scaling the queries is cheaper than scaling the N x M logits
    weights = matmul_softmax(mul(q, scale), kt)
    return matmul(weights, v)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Split the feature axis into ``heads`` groups and attend per group."""
    if heads == 1:
        return scaled_attention(q, k, v)
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (t.shape[0], heads, d // heads)), (1, 0, 2))

    out = scaled_attention(split(q), split(k), split(v))
    return reshape(transpose(out, (1, 0, 2)), (q.shape[0], d))


# -- volumetric ---------------------------------------------------------------------

_IM2COL_LIMIT = 1 << 25  # elements; above this use the per-offset loop


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """3-D cross-correlation of ``[C_in, D, H, W]`` with ``[C_out, C_in, k, k, k]``."""
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects [C,D,H,W] input and 5-D weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise ShapeError("conv3d kernels must be cubic")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv3d channel mismatch: input has {x.shape[0]}, weight expects {c_in}")
    if padding is None:
        if k % 2 == 0:
            raise ShapeError("default padding needs an odd kernel; pass padding explicitly")
        padding = (k - 1) // 2
    s, p = stride, padding
    _, d, h, w = x.shape
    od, oh, ow = (conv_output_extent(n, k, s, p) for n in (d, h, w))
    if min(od, oh, ow) < 1:
        raise ShapeError(f"conv3d output would be empty for input {x.shape} and kernel {k}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    w2 = weight.data.reshape(c_out, c_in * k ** 3)
    nvox = od * oh * ow
    use_cols = c_in * k ** 3 * nvox <= _IM2COL_LIMIT

    def window(a, b, c):
        return xp[:, a:a + s * (od - 1) + 1:s, b:b + s * (oh - 1) + 1:s, c:c + s * (ow - 1) + 1:s]

    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]
    if use_cols:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
        win = win[:, ::s, ::s, ::s][:, :od, :oh, :ow]
        cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c_in * k ** 3, nvox)
        out = w2 @ cols
    else:
        cols = None
        wk = weight.data
        out = np.zeros((c_out, nvox), dtype=np.result_type(x.data, weight.data))
        for a, b, c in offsets:
            out += wk[:, :, a, b, c] @ window(a, b, c).reshape(c_in, nvox)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, od, oh, ow)

    def back(g):
        g2 = g.reshape(c_out, nvox)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if use_cols:
                gcols = (w2.T @ g2).reshape(c_in, k, k, k, nvox)
                for a, b, c in offsets:
                    window_view = gxp[:, a:a + s * (od - 1) + 1:s, b:b + s * (oh - 1) + 1:s,
                                      c:c + s * (ow - 1) + 1:s]
                    window_view += gcols[:, a, b, c].reshape(c_in, od, oh, ow)
            else:
                for a, b, c in offsets:
                    window_view = gxp[:, a:a + s * (od - 1) + 1:s, b:b + s * (oh - 1) + 1:s,
                                      c:c + s * (ow - 1) + 1:s]
                    window_view += (weight.data[:, :, a, b, c].T @ g2).reshape(c_in, od, oh, ow)
            gx = gxp[:, p:p + d, p:p + h, p:p + w] if p else gxp
        if weight.requires_grad:
            if use_cols:
                gw = (g2 @ cols.T).reshape(weight.shape)
            else:
                gw = np.empty_like(weight.data)
                for a, b, c in offsets:
                    gw[:, :, a, b, c] = g2 @ window(a, b, c).reshape(c_in, nvox).T
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back, "conv3d")


def interpolation_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights ``[factor*n, n]`` with half-pixel centres."""
    m = np.zeros((factor * n, n), dtype=dtype)
    for o in range(factor * n):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def _apply_along(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, a, axes=([1], [axis])), 0, axis)


def trilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Trilinear resize of ``[C, D, H, W]`` by an integer factor (corners not aligned)."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    mats = [interpolation_matrix(n, factor, x.dtype) for n in x.shape[1:]]
    out = x.data
    for axis, m in enumerate(mats, start=1):
        out = _apply_along(out, m, axis)

    def back(g):
        for axis, m in enumerate(mats, start=1):
            g = _apply_along(g, m.T, axis)
        return (np.ascontiguousarray(g),)

    return make_result(np.ascontiguousarray(out), (x,), back, "upsample")


# -- sparse graph primitives --------------------------------------------------------

def csr_rows(indptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def sparse_matmul(values: Tensor, indptr: np.ndarray, indices: np.ndarray, x: Tensor) -> Tensor:
    """``A @ x`` where ``A`` is CSR with structure (indptr, indices) and entries ``values``."""
    n = len(indptr) - 1
    if values.shape != (len(indices),):
        raise ShapeError("sparse values must align with the CSR structure")
    if x.ndim != 2 or x.shape[0] != n:
        raise ShapeError(f"sparse_matmul expects [{n}, d] operand, got {x.shape}")
    a = sp.csr_matrix((values.data, indices, indptr), shape=(n, n))
    rows = csr_rows(indptr)

    def back(g):
        gv = None
        if values.requires_grad:
            gv = np.einsum("ed,ed->e", g[rows], x.data[indices])
        gx = (a.T @ g) if x.requires_grad else None
        return gv, gx

    return make_result(np.asarray(a @ x.data), (values, x), back, "sparse_matmul")


def pair_cosine(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Cosine similarity of row pairs ``(x[rows[e]], x[cols[e]])`` for each edge e.

    Self pairs are fixed at 1; a pair involving a zero vector scores 0.
    """
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=1))
    a, b = xd[rows], xd[cols]
    dot = np.einsum("ed,ed->e", a, b)
    denom = norms[rows] * norms[cols]
    live = (denom > 0) & (rows != cols)
    safe = np.where(live, denom, 1.0)
    out = np.where(live, dot / safe, 0.0).astype(xd.dtype)
    out[rows == cols] = 1.0

    def back(g):
        gl = np.where(live, g, 0.0)[:, None]
        sim = out[:, None]
        na = np.where(live, norms[rows], 1.0)[:, None]
        nb = np.where(live, norms[cols], 1.0)[:, None]
        ga = gl * (b / safe[:, None] - sim * a / (na * na))
        gb = gl * (a / safe[:, None] - sim * b / (nb * nb))
        gx = np.zeros_like(xd)
        np.add.at(gx, rows, ga)
        np.add.at(gx, cols, gb)
        return (gx,)

    return make_result(out, (x,), back, "pair_cosine")
