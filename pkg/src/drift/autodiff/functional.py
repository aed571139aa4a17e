"""Differentiable ops on :class:`Tensor`.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per parent (``None`` where a parent
does not need one).
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                           _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make(out, (a, b),
                lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                           _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    return make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make(out, (a,), lambda g: (g * _sigmoid(x),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi)."""
    x = a.data
    inner = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make(out, (a,), bw)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient is split evenly between tied maxima."""
    out_k = a.data.max(axis=axis, keepdims=True)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        mask = (a.data == out_k).astype(a.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (mask * gk,)

    return make(out, (a,), bw)


# ---------------------------------------------------------------- shape

def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice) indexing. Use :func:`take_rows` for integer gathers."""
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return make(np.array(out), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    like = next((t for t in tensors if isinstance(t, Tensor)), None)
    tensors = [as_tensor(t, like=like) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make(a.data[idx], (a,), bw)


def scatter_rows(a: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``a`` into an ``n``-row output at positions ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, idx, a.data)
    return make(out, (a,), lambda g: (g[idx],))


def segment_max(a: Tensor, seg: np.ndarray, n: int) -> tuple[Tensor, np.ndarray]:
    """Per-segment channel-wise max of rows. Empty segments give zero rows.

    Returns ``(out, nonempty)``. Gradient is split evenly among tied rows.
    """
    seg = np.asarray(seg, dtype=np.int64)
    x = a.data
    out = np.full((n,) + x.shape[1:], -np.inf, dtype=x.dtype)
    np.maximum.at(out, seg, x)
    nonempty = np.zeros(n, dtype=bool)
    nonempty[seg] = True
    out[~nonempty] = 0

    def bw(g):
        eq = (x == out[seg]).astype(x.dtype)
        cnt = np.zeros_like(out)
        np.add.at(cnt, seg, eq)
        return (eq * (g / np.where(cnt > 0, cnt, 1))[seg],)

    return make(out, (a,), bw), nonempty


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the trailing axis; leading axes are flattened for one GEMM."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make(out, parents, bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- sparse conv

def sparse_conv(x: Tensor, w: Tensor, b: Tensor | None, rules, n_out: int) -> Tensor:
    """Gather-GEMM-scatter convolution over a rulebook.

    ``w`` has shape ``(K * C_in, C_out)``; ``rules[k] = (in_rows, out_rows)``
    lists the active (input, output) pairs for kernel tap ``k``.
    """
    cin = x.shape[1]
    cout = w.shape[1]
    wk = w.data.reshape(len(rules), cin, cout)
    out = np.zeros((n_out, cout), dtype=x.dtype)
    for k, (ii, oo) in enumerate(rules):
        if len(ii):
            np.add.at(out, oo, x.data[ii] @ wk[k])
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(wk)
        for k, (ii, oo) in enumerate(rules):
            if len(ii):
                go = g[oo]
                np.add.at(gx, ii, go @ wk[k].T)
                gw[k] = x.data[ii].T @ go
        res = (gx, gw.reshape(w.shape))
        return res if b is None else res + (g.sum(axis=0),)

    return make(out, parents, bw)


# ---------------------------------------------------------------- dense conv (NHWC)

def _conv_out(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    cols = [xp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :]
            for di in range(3) for dj in range(3)]
    return np.concatenate(cols, axis=-1)


def _col2im(gcols: np.ndarray, shape_p, stride: int, cin: int) -> np.ndarray:
    gp = np.zeros(shape_p, dtype=gcols.dtype)
    _, ho, wo, _ = gcols.shape
    k = 0
    for di in range(3):
        for dj in range(3):
            gp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :] += \
                gcols[..., k * cin:(k + 1) * cin]
            k += 1
    return gp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation, zero padding 1, on ``(B, H, W, C)`` maps.

    ``w`` is ``(9 * C_in, C_out)`` with taps ordered ``(di, dj)`` row-major, the
    same layout the sparse convolutions use. Output site ``(i, j)`` reads input
    ``(stride*i + di, stride*j + dj)`` for ``di, dj in {-1, 0, 1}``.
    """
    bsz, h, wd, cin = x.shape
    if w.shape[0] != 9 * cin:
        raise ValueError(f"conv2d weight {w.shape} does not match {cin} input channels")
    ho, wo = _conv_out(h, stride), _conv_out(wd, stride)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, ho, wo, stride)
    out = cols @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gw = cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = _col2im(g @ w.data.T, xp.shape, stride, cin)
            gx = gp[:, 1:h + 1, 1:wd + 1, :]
        res = (gx, gw)
        return res if b is None else res + (g.sum(axis=(0, 1, 2)),)

    return make(out, parents, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, out_hw=None) -> Tensor:
    """2x upsampling transposed convolution: the adjoint of ``conv2d(stride=2)``.

    Input site ``(i, j)`` stamps tap ``(di, dj)`` onto output ``(2i+di, 2j+dj)``;
    taps landing outside the ``(2H, 2W)`` output are dropped.
    """
    bsz, h, wd, cin = x.shape
    # w is (9 * C_out, C_in): literally the weight of the strided conv it inverts
    cout = w.shape[0] // 9
    ho, wo = out_hw if out_hw is not None else (2 * h, 2 * wd)
    if _conv_out(ho, 2) != h or _conv_out(wo, 2) != wd:
        raise ValueError(f"output size {(ho, wo)} incompatible with input {(h, wd)}")
    gcols = x.data @ w.data.T
    shape_p = (bsz, ho + 2, wo + 2, cout)
    outp = _col2im(gcols, shape_p, 2, cout)
    out = outp[:, 1:ho + 1, 1:wo + 1, :]
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = _im2col(gp, h, wd, 2)
        gx = cols @ w.data if x.requires_grad else None
        gw = (cols.reshape(-1, cols.shape[-1]).T @ x.data.reshape(-1, cin)) if w.requires_grad else None
        res = (gx, gw)
        return res if b is None else res + (g.sum(axis=(0, 1, 2)),)

    return make(np.ascontiguousarray(out), parents, bw)


def upsample2x(x: Tensor, out_hw=None) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``(B, H, W, C)``, cropped to ``out_hw``."""
    bsz, h, wd, c = x.shape
    ho, wo = out_hw if out_hw is not None else (2 * h, 2 * wd)
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)[:, :ho, :wo, :]

    def bw(g):
        full = np.zeros((bsz, 2 * h, 2 * wd, c), dtype=g.dtype)
        full[:, :ho, :wo, :] = g
        return (full.reshape(bsz, h, 2, wd, 2, c).sum(axis=(2, 4)),)

    return make(np.ascontiguousarray(out), (x,), bw)
