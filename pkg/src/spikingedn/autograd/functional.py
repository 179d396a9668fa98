"""Differentiable primitives on NCHW feature maps."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, k: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def same_padding(k: int, dilation: int = 1) -> int:
    return dilation * (k - 1) // 2


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, Ho: int, Wo: int) -> np.ndarray:
    """Channel-major patch matrix of shape ``(Cin * k * k, B * Ho * Wo)``."""
    B, cin = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((cin, k, k, B, Ho, Wo), dtype=xp.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            r, c = i * dilation, j * dilation
            cols[:, i, j] = xt[:, :, r:r + hs:stride, c:c + ws:stride]
    return cols.reshape(cin * k * k, B * Ho * Wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, ``x`` is (B, Cin, H, W), ``weight`` is (Cout, Cin, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if k != k2:
        raise ShapeError("conv2d: only square kernels are supported")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    Ho = conv_output_size(H, k, stride, dilation, padding)
    Wo = conv_output_size(W, k, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} with kernel {k}, dilation {dilation}")

    wd = weight.data
    w2 = wd.reshape(cout, -1)
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        xp = x.data
        out = np.tensordot(wd[:, :, 0, 0], xp, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, k, stride, dilation, Ho, Wo)
        out = (w2 @ cols).reshape(cout, B, Ho, Wo).transpose(1, 0, 2, 3)
        del cols
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            if weight.requires_grad:
                gw = np.tensordot(g, xp, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if x.requires_grad:
                gx = np.tensordot(wd[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            return gx, gw, gb
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if weight.requires_grad:
            gw = (g2 @ _im2col(xp, k, stride, dilation, Ho, Wo).T).reshape(wd.shape)
        if x.requires_grad:
            dc = (w2.T @ g2).reshape(cin, k, k, B, Ho, Wo)
            gxt = np.zeros((cin, B) + xp.shape[2:], dtype=g.dtype)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    r, c = i * dilation, j * dilation
                    gxt[:, :, r:r + hs:stride, c:c + ws:stride] += dc[:, i, j]
            gxt = gxt.transpose(1, 0, 2, 3)
            gx = gxt[:, :, padding:padding + H, padding:padding + W] if padding else gxt
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation. In training mode the running buffers are updated in place."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError(f"batch_norm: {C} channels but parameters of shape {gamma.shape}")
    xd = x.data
    gd = gamma.data.reshape(1, C, 1, 1)
    if training:
        n = xd.size // C
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    out = gd * xhat + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, ggamma, gbeta
        scale = (gamma.data * inv).reshape(1, C, 1, 1)
        if training:
            n = xd.size // C
            gx = scale / n * (n * g - gbeta.reshape(1, C, 1, 1) - xhat * ggamma.reshape(1, C, 1, 1))
        else:
            gx = g * scale
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward)


def linear_interp_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Row ``o`` holds the weights that bilinear (half-pixel) upsampling gives each input index."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def upsample_average(x: Tensor, factor: int) -> Tensor:
    """Smooth (bilinear) upsampling; each output is a weighted average of its input neighbours."""
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    _, _, H, W = x.shape
    mh = linear_interp_matrix(H, factor, x.dtype)
    mw = linear_interp_matrix(W, factor, x.dtype)
    out = np.einsum("oh,bchw,pw->bcop", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),)

    return Tensor._make(out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ outside axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    from .tensor import unbroadcast

    def backward(g):
        return (unbroadcast(g, src),)

    return Tensor._make(np.broadcast_to(x.data, shape).copy(), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def log_softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(scores: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean per-pixel cross-entropy of softmax(scores) against integer labels.

    ``scores`` is (B, C, H, W); ``labels`` is (B, H, W). Pixels equal to
    ``ignore_index`` are excluded from the average.
    """
    if scores.ndim != 4:
        raise ShapeError(f"scores must be (B, C, H, W), got {scores.shape}")
    B, C, H, W = scores.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels {labels.shape} do not match scores {scores.shape}")
    valid = labels != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    if np.any(labels[valid] >= C):
        raise ValueError(f"cross_entropy: label out of range for {C} classes")
    logp = log_softmax(scores.data, axis=1)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / n

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        p *= valid[:, None]
        return (p * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=scores.dtype), (scores,), backward)
