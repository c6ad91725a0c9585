"""Differentiable neural-net operations on top of the Tensor engine.

Convolution follows cross-correlation semantics with output spatial size
floor((H + 2p - k) / s) + 1. All ops accept either a single sample
(channel-first, no batch axis) or a batched input with one leading axis.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor, _make, _unbroadcast, as_tensor, mul

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Lower bound of the exact-erf GeLU output, attained near x = -0.7518.
GELU_MIN = -0.17004226

NEG_MASK_VALUE = -1e30


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF GeLU: x * Phi(x) (not the tanh approximation)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(out_data, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out_data = x.data * mask

    def backward(g):
        x._accumulate(g * mask)

    return _make(out_data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out_data = special.expit(x.data)

    def backward(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    neg = np.minimum(x.data, 0.0)
    expm = alpha * (np.exp(neg) - 1.0)
    pos_mask = x.data > 0
    out_data = np.where(pos_mask, x.data, expm)

    def backward(g):
        x._accumulate(g * np.where(pos_mask, 1.0, expm + alpha))

    return _make(out_data, (x,), backward)


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably; building block for BCE-with-logits."""
    x = as_tensor(x)
    out_data = np.logaddexp(0.0, x.data)

    def backward(g):
        x._accumulate(g * special.expit(x.data))

    return _make(out_data, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along `axis`; rejects non-finite input."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def backward(g):
        x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis: x @ W^T + b with W of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input dim -1 is {x.shape[-1]}, weight expects {weight.shape[1]}"
        )
    out_data = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            weight._accumulate(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def embedding(table, ids) -> Tensor:
    """Row lookup into a (vocab, dim) table; scatter-add on the way back."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _make(np.ascontiguousarray(out_data), (table,), backward)


# -- convolution -----------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return col, ho, wo


def _col2im(dcol: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x_shape
    ho, wo = dcol.shape[-2:]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcol[
                :, :, i, j
            ]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation with stride/padding/groups.

    `weight` has shape (C_out, C_in // groups, kH, kW); groups == C_in gives a
    depthwise convolution. Depthwise 1x1 kernels take a fast elementwise path.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: expected 3D or 4D input, got {x.ndim}D")
    n, c_in, h, w = xd.shape
    c_out, c_per_g, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_per_g != c_in // groups:
        raise ShapeError(
            f"conv2d: weight dim 1 is {c_per_g}, expected C_in/groups = {c_in // groups}"
        )

    if groups == c_in == c_out and kh == kw == 1 and stride == 1 and padding == 0:
        return _depthwise_1x1(x, weight, bias, squeeze, xd)
    if groups == 1 and kh == kw == 1 and stride == 1 and padding == 0:
        return _pointwise(x, weight, bias, squeeze, xd)

    col, ho, wo = _im2col(xd, kh, kw, stride, padding)
    colg = col.reshape(n, groups, (c_in // groups) * kh * kw, ho * wo)
    wg = weight.data.reshape(groups, c_out // groups, c_per_g * kh * kw)
    out = np.matmul(wg, colg)  # (n, groups, c_out/groups, ho*wo)
    out_data = out.reshape(n, c_out, ho, wo)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({c_out},)")
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gg = g4.reshape(n, groups, c_out // groups, ho * wo)
        if weight.requires_grad:
            dw = np.matmul(gg, colg.transpose(0, 1, 3, 2)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g4.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcol = np.matmul(wg.transpose(0, 2, 1), gg)
            dcol = dcol.reshape(n, c_in, kh, kw, ho, wo)
            dx = _col2im(dcol, xd.shape, kh, kw, stride, padding)
            x._accumulate(dx[0] if squeeze else dx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def _pointwise(x, weight, bias, squeeze, xd):
    """1x1 stride-1 conv as a plain channel matmul, skipping im2col."""
    n, c_in, h, w = xd.shape
    c_out = weight.shape[0]
    w2 = weight.data.reshape(c_out, c_in)
    out = np.matmul(w2, xd.reshape(n, c_in, h * w))
    out_data = out.reshape(n, c_out, h, w)
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g4 = (g[None] if squeeze else g).reshape(n, c_out, h * w)
        if weight.requires_grad:
            dw = np.matmul(g4, xd.reshape(n, c_in, h * w).transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g4.sum(axis=(0, 2)))
        if x.requires_grad:
            dx = np.matmul(w2.T, g4).reshape(n, c_in, h, w)
            x._accumulate(dx[0] if squeeze else dx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def _depthwise_1x1(x, weight, bias, squeeze, xd):
    c = xd.shape[1]
    wvec = weight.data.reshape(c)
    out_data = xd * wvec[:, None, None]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data[:, None, None]
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        if x.requires_grad:
            dx = g4 * wvec[:, None, None]
            x._accumulate(dx[0] if squeeze else dx)
        if weight.requires_grad:
            weight._accumulate((g4 * xd).sum(axis=(0, 2, 3)).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g4.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def channel_affine(x, weight, bias=None, channel_axis: int = -1) -> Tensor:
    """Per-channel scale (+ shift): a depthwise kernel-1 conv on any layout."""
    x, weight = as_tensor(x), as_tensor(weight)
    c = x.shape[channel_axis]
    if weight.shape != (c,):
        raise ShapeError(f"channel_affine: weight shape {weight.shape}, expected ({c},)")
    shape = [1] * x.ndim
    shape[channel_axis] = c
    wv = weight.data.reshape(shape)
    out_data = x.data * wv
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data.reshape(shape)
    red = tuple(i for i in range(x.ndim) if i != channel_axis % x.ndim)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * wv)
        if weight.requires_grad:
            weight._accumulate((g * x.data).sum(axis=red))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=red))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


# -- pooling / resampling ----------------------------------------------------


def _pool_bounds(in_size: int, out_size: int):
    starts = (np.arange(out_size) * in_size) // out_size
    ends = -((-(np.arange(out_size) + 1) * in_size) // out_size)
    return starts, ends


def adaptive_avg_pool2d(x, out_size) -> Tensor:
    """Mean over start/end partition windows; out=(1,1) is the global mean."""
    x = as_tensor(x)
    oh, ow = (out_size, out_size) if isinstance(out_size, int) else out_size
    h, w = x.shape[-2], x.shape[-1]
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise ShapeError(f"adaptive_avg_pool2d: target ({oh},{ow}) exceeds input ({h},{w})")
    rs, re = _pool_bounds(h, oh)
    cs, ce = _pool_bounds(w, ow)
    out_data = np.empty(x.shape[:-2] + (oh, ow), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            out_data[..., i, j] = x.data[..., rs[i] : re[i], cs[j] : ce[j]].mean(axis=(-2, -1))

    def backward(g):
        dx = np.zeros_like(x.data)
        for i in range(oh):
            for j in range(ow):
                area = (re[i] - rs[i]) * (ce[j] - cs[j])
                dx[..., rs[i] : re[i], cs[j] : ce[j]] += g[..., i : i + 1, j : j + 1] / area
        x._accumulate(dx)

    return _make(out_data, (x,), backward)


def resize_nearest2d(x, out_size) -> Tensor:
    """Nearest-neighbor resize to an arbitrary (h, w); backward scatter-adds."""
    x = as_tensor(x)
    oh, ow = out_size
    h, w = x.shape[-2], x.shape[-1]
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    out_data = np.ascontiguousarray(x.data[..., rows[:, None], cols[None, :]])

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (..., rows[:, None], cols[None, :]), g)
        x._accumulate(dx)

    return _make(out_data, (x,), backward)


def upsample_nearest2d(x, factor: int) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        lead = g.shape[:-2]
        h, w = x.shape[-2], x.shape[-1]
        gr = g.reshape(lead + (h, factor, w, factor))
        x._accumulate(gr.sum(axis=(-3, -1)))

    return _make(out_data, (x,), backward)


def _bilinear_matrix(in_size: int, factor: int, dtype) -> np.ndarray:
    """(out, in) interpolation matrix: half-pixel centers, clamped borders."""
    coords = np.clip((np.arange(in_size * factor) + 0.5) / factor - 0.5, 0, in_size - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = coords - lo
    m = np.zeros((in_size * factor, in_size), dtype=dtype)
    rows = np.arange(in_size * factor)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear2d(x, factor: int) -> Tensor:
    """Bilinear x`factor` upsample (half-pixel centers, clamped borders).

    Separable and linear: out = R @ x @ C^T with per-axis interpolation
    matrices, so the backward pass is the exact transpose R^T @ g @ C.
    """
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    r = _bilinear_matrix(h, factor, x.dtype)
    c = _bilinear_matrix(w, factor, x.dtype)
    out_data = r @ x.data @ c.T

    def backward(g):
        x._accumulate(r.T @ g @ c)

    return _make(np.ascontiguousarray(out_data), (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-first batch norm over (N, H, W); running stats updated in place."""
    x = as_tensor(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    axes = (0, 2, 3)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None]) * invstd[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        if gamma.requires_grad:
            gamma._accumulate((g4 * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g4.sum(axis=axes))
        if x.requires_grad:
            gs = gamma.data[:, None, None] * invstd[:, None, None]
            if training:
                m = xd.shape[0] * xd.shape[2] * xd.shape[3]
                gsum = g4.sum(axis=axes)[:, None, None]
                gxsum = (g4 * xhat).sum(axis=axes)[:, None, None]
                dx = gs * (g4 - gsum / m - xhat * gxsum / m)
            else:
                dx = gs * g4
            x._accumulate(dx[0] if squeeze else dx)

    return _make(out_data, (x, gamma, beta), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Numerically stable binary cross entropy on raw logits."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    return softplus(logits) - mul(as_tensor(logits), t)
