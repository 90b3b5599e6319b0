"""Differentiable operations on :class:`Tensor`.

All image-like tensors use NCHW layout.  Each op computes its forward result
with numpy and registers an analytic backward closure.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _check_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.ndim != ndim:
        raise ValueError(f"{what}: expected a {ndim}-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return Tensor._make(a.data + b, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


elementwise_add = add


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def mul(a, b) -> Tensor:
    """Product with a python scalar, or elementwise product of equal shapes."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor._make(a.data * s, (a,), lambda g: (g * s,))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return Tensor._make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(src, g, dtype=g.dtype),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def index_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along the first axis (duplicates allowed)."""
    index = np.asarray(index, dtype=np.int64)
    src = x.shape

    def backward(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(x.data[index], (x,), backward)


def take_channel(x: Tensor, channels) -> Tensor:
    """Per-row channel select: ``[R, K, ...] -> [R, ...]`` with ``out[r] = x[r, channels[r]]``."""
    channels = np.asarray(channels, dtype=np.int64)
    rows = np.arange(x.shape[0])
    if channels.shape != (x.shape[0],):
        raise ValueError(f"take_channel: need one channel per row, got {channels.shape} for {x.shape}")
    src = x.shape

    def backward(g):
        out = np.zeros(src, dtype=g.dtype)
        out[rows, channels] = g
        return (out,)

    return Tensor._make(x.data[rows, channels], (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    s = _softmax(x.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    _check_ndim(x, 2, "linear input")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``weight`` is [K, C, kh, kw]."""
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(weight, 4, "conv2d weight")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d: input channels (dim 1) {c} != weight channels {wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({k},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat, (n, c, hp, wp), kh, kw, stride, oh, ow)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out), parents, backward)


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel ``2*stride`` and padding ``stride//2``.

    ``weight`` is [C_in, C_out, 2*stride, 2*stride]; the output is ``stride``
    times larger than the input in both spatial dimensions.
    """
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"deconv2d: stride must be a positive integer, got {stride!r}")
    _check_ndim(x, 4, "deconv2d input")
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"deconv2d: input channels (dim 1) {c} != weight in-channels {ci}")
    if kh != 2 * stride or kw != 2 * stride:
        raise ValueError(f"deconv2d: kernel must be {2 * stride}x{2 * stride} for stride {stride}, got {kh}x{kw}")
    pad = stride // 2
    full_h, full_w = (h - 1) * stride + kh, (w - 1) * stride + kw
    oh, ow = h * stride, w * stride
    wmat = weight.data.reshape(c, -1)
    xr = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    cols = xr @ wmat
    full = _col2im(cols, (n, co, full_h, full_w), kh, kw, stride, h, w)
    out = full[:, :, pad : pad + oh, pad : pad + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gfull = np.zeros((n, co, full_h, full_w), dtype=g.dtype)
        gfull[:, :, pad : pad + oh, pad : pad + ow] = g
        gcols = _im2col(gfull, kh, kw, stride, h, w)
        gw = (xr.T @ gcols).reshape(weight.shape)
        gx = (gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(np.ascontiguousarray(out), parents, backward)


def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    _check_ndim(x, 4, "maxpool2d input")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"maxpool2d: input {h}x{w} smaller than window {k}")
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    win = win.reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g * (arg == idx)
        return (gx,)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def interp_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights [out, in] (half-pixel centers, edge clamped)."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    m = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_ndim(x, 4, "bilinear_resize input")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return Tensor._make(x.data, (x,), lambda g: (g,))
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T
    return Tensor._make(out, (x,), lambda g: (ah.T @ g @ aw,))


# ---------------------------------------------------------------------------
# losses (mean reduction over contributing elements)
# ---------------------------------------------------------------------------


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def cross_entropy_loss(logits: Tensor, target, ignore_index: int = -100) -> Tensor:
    """Mean softmax cross-entropy; logits [N, C] or [N, C, H, W]."""
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim not in (2, 4):
        raise ValueError(f"cross_entropy_loss: logits must be [N,C] or [N,C,H,W], got {logits.shape}")
    c = logits.shape[1]
    z = logits.data if logits.ndim == 2 else logits.data.transpose(0, 2, 3, 1).reshape(-1, c)
    t = target.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ValueError(f"cross_entropy_loss: {t.shape[0]} labels for {z.shape[0]} positions")
    valid = t != ignore_index
    if np.any((t[valid] < 0) | (t[valid] >= c)):
        raise ValueError(f"cross_entropy_loss: labels must lie in [0, {c}) or equal ignore_index")
    count = int(valid.sum())
    if count == 0:
        return Tensor._make(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros(logits.shape, dtype=g.dtype),))
    rows = np.nonzero(valid)[0]
    logp = _log_softmax(z[rows], axis=1)
    loss = -logp[np.arange(count), t[rows]].sum() / count

    def backward(g):
        gz = np.zeros_like(z)
        p = np.exp(logp)
        p[np.arange(count), t[rows]] -= 1.0
        gz[rows] = p * (g / count)
        if logits.ndim == 4:
            n, _, h, w = logits.shape
            gz = gz.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return (gz,)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def binary_cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != logits.shape:
        raise ValueError(f"binary_cross_entropy_loss: target shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("binary_cross_entropy_loss: targets must be 0 or 1")
    t = t.astype(logits.dtype)
    x = logits.data
    n = x.size
    if n == 0:
        return Tensor._make(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros(logits.shape, dtype=g.dtype),))
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def backward(g):
        return ((_sigmoid(x) - t) * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def smooth_l1_loss(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    if beta <= 0:
        raise ValueError("smooth_l1_loss: beta must be positive")
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"smooth_l1_loss: target shape {t.shape} != pred shape {pred.shape}")
    n = pred.data.size
    if n == 0:
        return Tensor._make(np.zeros((), dtype=pred.dtype), (pred,), lambda g: (np.zeros(pred.shape, dtype=g.dtype),))
    d = pred.data - t
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).sum() / n

    def backward(g):
        return (np.where(small, d / beta, np.sign(d)) * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=pred.dtype), (pred,), backward)
