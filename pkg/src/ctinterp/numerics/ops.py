"""Convolution, sampling, activation and loss operations with backward rules.

Spatial ops accept either a single sample ``(C, H, W)`` or a batch
``(N, C, H, W)``; results keep the caller's rank.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, emit

DICE_EPS = 1e-5


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _windows(xpad: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """im2col: (N,C,Hp,Wp) -> (N*ho*wo, C*k*k)."""
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _scatter_windows(cols: np.ndarray, out_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """col2im: adjoint of :func:`_windows`; cols is (N, ho, wo, C, k, k)."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + span_h : stride, j : j + span_w : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _conv_out_size(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(f"conv2d: {axis} axis too small ({size}) for kernel {k}, stride {stride}, padding {padding}")
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with square kernel ``weight`` of shape (C_out, C_in, k, k)."""
    xb, single = _batched(x, "conv2d")
    w, b = weight.data, bias.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out, C_in, k, k), got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if xb.shape[1] != c_in:
        raise ShapeError(f"conv2d: channel axis mismatch, input has {xb.shape[1]} channels, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {b.shape}")
    n, _, h, wd = xb.shape
    ho = _conv_out_size(h, k, stride, padding, "height")
    wo = _conv_out_size(wd, k, stride, padding, "width")
    xpad = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    cols = _windows(xpad, k, stride, ho, wo)
    wmat = w.reshape(c_out, -1)
    out = (cols @ wmat.T + b).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    pad_shape = xpad.shape

    def backward(g):
        gb = g[None] if single else g
        gm = gb.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(w.shape)
        gbias = gm.sum(axis=0)
        dcols = (gm @ wmat).reshape(n, ho, wo, c_in, k, k)
        dx = _scatter_windows(dcols, pad_shape, k, stride, ho, wo)
        if padding:
            dx = dx[:, :, padding:-padding, padding:-padding]
        return (dx[0] if single else dx), gw, gbias

    return emit(out[0] if single else out, (x, weight, bias), backward, "conv2d")


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution with ``weight`` of shape (C_in, C_out, k, k).

    Requires ``k - 2*padding == stride`` so the output is exactly ``stride`` times
    the input size.
    """
    xb, single = _batched(x, "deconv2d")
    w, b = weight.data, bias.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"deconv2d: weight must be (C_in, C_out, k, k), got {w.shape}")
    c_in, c_out, k, _ = w.shape
    if xb.shape[1] != c_in:
        raise ShapeError(f"deconv2d: channel axis mismatch, input has {xb.shape[1]} channels, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"deconv2d: bias must have shape ({c_out},), got {b.shape}")
    if k - 2 * padding != stride:
        raise ShapeError(f"deconv2d: kernel {k}, padding {padding} does not give exact x{stride} upsampling")
    n, _, h, wd = xb.shape
    full = (n, c_out, (h - 1) * stride + k, (wd - 1) * stride + k)
    xm = xb.transpose(0, 2, 3, 1).reshape(-1, c_in)
    wmat = w.reshape(c_in, -1)
    cols = (xm @ wmat).reshape(n, h, wd, c_out, k, k)
    out = _scatter_windows(cols, full, k, stride, h, wd)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    out = np.ascontiguousarray(out + b[None, :, None, None])

    def backward(g):
        gb = g[None] if single else g
        gfull = np.pad(gb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else gb
        gcols = _windows(gfull, k, stride, h, wd)
        dx = (gcols @ wmat.T).reshape(n, h, wd, c_in).transpose(0, 3, 1, 2)
        gw = (xm.T @ gcols).reshape(w.shape)
        gbias = gb.sum(axis=(0, 2, 3))
        return (dx[0] if single else dx), gw, gbias

    return emit(out[0] if single else out, (x, weight, bias), backward, "deconv2d")


def activation(x: Tensor, kind: str) -> Tensor:
    d = x.data
    if kind == "relu":
        mask = d > 0
        return emit(np.where(mask, d, 0).astype(d.dtype), (x,), lambda g: (g * mask,), "relu")
    if kind == "sigmoid":
        # split by sign to avoid overflow in exp
        e = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
        return emit(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")
    if kind == "tanh":
        t = np.tanh(d)
        return emit(t, (x,), lambda g: (g * (1 - t * t),), "tanh")
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def bilinear_sample(source: Tensor, coords_x: Tensor, coords_y: Tensor) -> Tensor:
    """Sample ``source`` at continuous pixel coordinates with edge clamping.

    ``source`` is (C,H,W) or (N,C,H,W); coordinate maps are (H,W), (N,H,W) or
    (N,1,H,W) to match. Gradients flow to the source and to both coordinate maps;
    coordinates outside the image get zero gradient (clamped region).
    """
    src, single = _batched(source, "bilinear_sample")
    n, c, h, w = src.shape
    cx_shape, cy_shape = coords_x.shape, coords_y.shape
    if cx_shape != cy_shape:
        raise ShapeError(f"bilinear_sample: coordinate maps differ in shape {cx_shape} vs {cy_shape}")
    try:
        cx = coords_x.data.reshape(n, h, w)
        cy = coords_y.data.reshape(n, h, w)
    except ValueError:
        raise ShapeError(f"bilinear_sample: coordinate shape {cx_shape} does not match source {source.shape}") from None
    if cx_shape[-2:] != (h, w):
        raise ShapeError(f"bilinear_sample: coordinate shape {cx_shape} does not match source {source.shape}")
    dtype = src.dtype
    x = np.clip(cx, 0, w - 1)
    y = np.clip(cy, 0, h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0).astype(dtype)[:, None]
    wy = (y - y0).astype(dtype)[:, None]
    flat = src.reshape(n, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(n, 1, h * w)
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2).reshape(n, c, h, w)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    inside_x = ((cx >= 0) & (cx <= w - 1)).astype(dtype)
    inside_y = ((cy >= 0) & (cy <= h - 1)).astype(dtype)

    def backward(g):
        gb = g[None] if single else g
        gsrc = None
        if source.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for yy, xx, wt in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                idx = (base + (yy * w + xx).reshape(n, 1, h * w)).ravel()
                acc += np.bincount(idx, weights=(gb * wt).reshape(-1), minlength=acc.size)
            gsrc = acc.astype(dtype).reshape(n, c, h, w)
            if single:
                gsrc = gsrc[0]
        gx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * gb
        gy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * gb
        gx = (gx.sum(axis=1) * inside_x).reshape(cx_shape)
        gy = (gy.sum(axis=1) * inside_y).reshape(cy_shape)
        return gsrc, gx, gy

    return emit(out[0] if single else out, (source, coords_x, coords_y), backward, "bilinear_sample")


def tv_regularizer(field: Tensor, reduction: str = "sum") -> Tensor:
    """Anisotropic total variation: L1 norm of forward differences along H and W.

    ``reduction="sum"`` returns the plain L1 norm summed over channels (and
    batch); ``"mean"`` divides that sum by the number of field elements.
    """
    f = field.data
    dh = f[..., 1:, :] - f[..., :-1, :]
    dw = f[..., :, 1:] - f[..., :, :-1]
    total = np.abs(dh).sum(dtype=np.float64) + np.abs(dw).sum(dtype=np.float64)
    if reduction == "sum":
        norm = 1.0
    elif reduction == "mean":
        norm = float(f.size)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    sh, sw = np.sign(dh), np.sign(dw)

    def backward(g):
        gf = np.zeros_like(f)
        gf[..., 1:, :] += sh
        gf[..., :-1, :] -= sh
        gf[..., :, 1:] += sw
        gf[..., :, :-1] -= sw
        return (gf * (g / norm),)

    return emit(np.asarray(total / norm, dtype=f.dtype), (field,), backward, "tv_regularizer")


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    s = np.sign(diff)
    value = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=a.dtype)
    return emit(value, (a, b), lambda g: (s * (g / n), s * (-g / n)), "l1_loss")


def soft_dice_loss(pred_prob: Tensor, target_onehot: Tensor, eps: float = DICE_EPS, pooled: bool = False) -> Tensor:
    """1 - mean over label channels (and batch) of the smoothed Dice coefficient.

    With ``pooled`` the overlap sums run over the batch axis too, giving one
    Dice per channel for (N, C, H, W) inputs.
    """
    if pred_prob.shape != target_onehot.shape:
        raise ShapeError(f"soft_dice_loss: shape mismatch {pred_prob.shape} vs {target_onehot.shape}")
    p = pred_prob.data
    t = target_onehot.data.astype(p.dtype)
    axes = (0, -2, -1) if pooled else (-2, -1)
    inter = (p * t).sum(axis=axes, dtype=np.float64)
    denom = p.sum(axis=axes, dtype=np.float64) + t.sum(axis=axes, dtype=np.float64) + eps
    dice = (2 * inter + eps) / denom
    count = dice.size
    value = np.asarray(1.0 - dice.mean(), dtype=p.dtype)

    def backward(g):
        num = (2 * inter + eps)[..., None, None]
        den = denom[..., None, None]
        dd = (2 * t * den - num) / (den * den)
        gp = (-float(g) / count) * dd
        return gp.astype(p.dtype), None

    return emit(value, (pred_prob, target_onehot), backward, "soft_dice_loss")


def softmax(logits: Tensor, axis: int | None = None) -> Tensor:
    """Softmax over the channel axis (axis 0 for a single sample, 1 for a batch)."""
    z = logits.data
    if axis is None:
        axis = z.ndim - 3
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return emit(s, (logits,), backward, "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixelwise cross-entropy of class ``logits`` against integer ``labels``.

    ``logits`` is (N,K,H,W) with labels (N,H,W), or (K,H,W) with labels (H,W).
    """
    z = logits.data
    axis = z.ndim - 3
    labels = np.asarray(labels)
    k = z.shape[axis]
    shifted = z - z.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - logsum
    onehot = one_hot(labels, k, axis=axis, dtype=z.dtype)
    if onehot.shape != z.shape:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {z.shape}")
    m = labels.size
    value = np.asarray(-(onehot * logp).sum(dtype=np.float64) / m, dtype=z.dtype)

    def backward(g):
        return ((np.exp(logp) - onehot) * (g / m),)

    return emit(value, (logits,), backward, "cross_entropy")


def one_hot(labels: np.ndarray, num_classes: int, axis: int = 1, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    oh = (labels[..., None] == np.arange(num_classes)).astype(dtype)
    return np.moveaxis(oh, -1, axis if axis >= 0 else labels.ndim + 1 + axis)
