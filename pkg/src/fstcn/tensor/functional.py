"""Differentiable ops over :class:`~fstcn.tensor.core.Tensor`.

Layout conventions:

* images / feature maps are channel-last, ``(batch, x, y, channels)``;
* 2D kernels are ``(k_x, k_y, c_in, c_out)``;
* convolution is cross-correlation (no kernel flip) with zero padding.

Every op computes its forward result with numpy and, when recording on a
:class:`~fstcn.tensor.core.Tape`, registers a closure that maps the output
gradient to input gradients.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, as_tensor, record

Padding = Union[int, str, tuple]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if _needs(a) else None
        gb = _unbroadcast(g * ad, bd.shape) if _needs(b) else None
        return ga, gb

    return record("mul", ad * bd, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return record("log", np.log(xd), (x,), lambda g: (g / xd,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {ad.shape} and {bd.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if _needs(a) else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if _needs(b) else None
        return ga, gb

    return record("matmul", ad @ bd, (a, b), backward)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = tuple(range(len(shape))) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", np.asarray(x.data.mean(axis=axis)), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return record("transpose", np.transpose(x.data, axes), (x,),
                  lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (repeated indices allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    unique = np.unique(idx).size == idx.size

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        if unique:
            moved[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return record("take", np.take(x.data, idx, axis=axis), (x,), backward)


def take_per_row(x, indices) -> Tensor:
    """``out[b] = x[b, indices[b]]`` for a batch-leading ``x``."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, idx] = g
        return (out,)

    return record("take_per_row", x.data[rows, idx], (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities, normalization, regularization
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record("softmax", p, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (batch, classes) against integer labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} incompatible with labels {y.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(y))
    loss = np.mean(lse - z[rows, y])
    p = np.exp(z - lse[:, None])

    def backward(g):
        d = p.copy()
        d[rows, y] -= 1.0
        return (d * (g / len(y)),)

    return record("cross_entropy", np.asarray(loss), (logits,), backward)


def dropout(x, prob: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. Identity (the same object) when not training."""
    if not 0.0 <= prob < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {prob}")
    x = as_tensor(x)
    if not training or prob == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= prob) / (1.0 - prob)
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def lrn(x, k: float = 2.0, n: int = 5, alpha: float = 5e-4, beta: float = 0.75) -> Tensor:
    """Cross-channel local response normalization over the last axis.

    ``y_c = x_c / (k + alpha * sum_{|j-c| <= n//2} x_j**2) ** beta``
    """
    x = as_tensor(x)
    xd = x.data
    half = n // 2

    def window_sum(v):
        pad = [(0, 0)] * (v.ndim - 1) + [(half + 1, half)]
        cs = np.cumsum(np.pad(v, pad), axis=-1)
        return cs[..., 2 * half + 1:] - cs[..., :-2 * half - 1]

    s = k + alpha * window_sum(xd * xd)
    scale = s ** -beta
    out = xd * scale

    def backward(g):
        inner = window_sum(g * xd * scale / s)
        return (g * scale - 2.0 * alpha * beta * xd * inner,)

    return record("lrn", out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _axis_padding(spec, k: int, n: int, stride: int) -> tuple[int, int]:
    if spec is None or spec == "valid":
        return 0, 0
    if spec == "same":
        out = math.ceil(n / stride)
        total = max((out - 1) * stride + k - n, 0)
        return total // 2, total - total // 2
    if isinstance(spec, (int, np.integer)):
        if spec < 0:
            raise ValueError(f"negative padding {spec}")
        return int(spec), int(spec)
    before, after = spec
    return int(before), int(after)


def resolve_padding(padding: Padding, kernel: tuple, extent: tuple, stride: tuple) -> list:
    """Turn a padding spec into ``[(before, after), ...]`` per sliding axis.

    ``padding`` is ``"same"``, ``"valid"``, an int applied to every side, or a
    tuple with one entry (int / pair / str) per sliding axis.
    """
    if isinstance(padding, tuple) and len(padding) == len(kernel):
        specs = padding
    else:
        specs = (padding,) * len(kernel)
    return [_axis_padding(p, k, n, s) for p, k, n, s in zip(specs, kernel, extent, stride)]


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def output_extent(n: int, k: int, stride: int, before: int, after: int) -> int:
    return (n + before + after - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding: Padding = 0) -> Tensor:
    """2D cross-correlation summed over input channels.

    Args:
        x: ``(batch, x, y, c_in)`` or unbatched ``(x, y, c_in)``.
        w: ``(k_x, k_y, c_in, c_out)``.
        b: optional ``(c_out,)`` bias.
        stride: int or per-axis pair.
        padding: see :func:`resolve_padding`; zeros are padded.

    Returns:
        ``(batch, x', y', c_out)`` with ``x' = (x + pads - k_x) // s_x + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), w, b, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects input (B,X,Y,C) and kernel (kx,ky,Cin,Cout), got {x.shape} and {w.shape}")
    bsz, nx, ny, cin = x.shape
    kx, ky, kcin, cout = w.shape
    if kcin != cin:
        raise ValueError(f"conv2d shape mismatch: kernel expects {kcin} input channels, input has {cin} (input {x.shape}, kernel {w.shape})")
    sx, sy = _as_pair(stride)
    if sx < 1 or sy < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    (px0, px1), (py0, py1) = resolve_padding(padding, (kx, ky), (nx, ny), (sx, sy))
    if kx > nx + px0 + px1 or ky > ny + py0 + py1:
        raise ValueError(f"conv2d kernel {kx}x{ky} larger than padded input {nx + px0 + px1}x{ny + py0 + py1}")

    xp = np.pad(x.data, ((0, 0), (px0, px1), (py0, py1), (0, 0)))
    win = sliding_window_view(xp, (kx, ky), axis=(1, 2))[:, ::sx, ::sy]
    ox, oy = win.shape[1], win.shape[2]
    wd = w.data
    out = np.tensordot(win, wd, axes=([3, 4, 5], [2, 0, 1]))
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)

    def backward(g):
        gw = gx = gb = None
        if _needs(w):
            gw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        if _needs(x):
            cols = np.tensordot(g, wd, axes=([3], [3]))  # (B, ox, oy, kx, ky, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kx):
                for j in range(ky):
                    gxp[:, i:i + sx * (ox - 1) + 1:sx, j:j + sy * (oy - 1) + 1:sy, :] += cols[:, :, :, i, j, :]
            gx = gxp[:, px0:px0 + nx, py0:py0 + ny, :]
        if b is not None and _needs(b):
            gb = g.sum(axis=(0, 1, 2))
        return (gx, gw, gb)[:len(inputs)]

    return record("conv2d", out, inputs, backward)


def conv1d_tf(x, w, b=None, stride=1, padding: Padding = "same") -> Tensor:
    """Temporal convolution: a 2D cross-correlation sliding over (t, f).

    Args:
        x: ``(..., t, f)``; leading axes are independent (batch, spatial position).
        w: ``(k_t, k_f, n_out)``.
        b: optional ``(n_out,)``.

    Returns:
        ``(..., t', f', n_out)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 2 or w.ndim != 3:
        raise ValueError(f"conv1d_tf expects input (..., t, f) and kernel (k_t, k_f, n_out), got {x.shape} and {w.shape}")
    lead = x.shape[:-2]
    t, f = x.shape[-2:]
    flat = reshape(x, (int(np.prod(lead, dtype=int)), t, f, 1))
    kernel = reshape(w, w.shape[:2] + (1, w.shape[2]))
    out = conv2d(flat, kernel, b, stride, padding)
    return reshape(out, lead + out.shape[1:])


def maxpool2d(x, window, stride, padding: Padding = 0) -> Tensor:
    """Max pooling over ``(x, y)`` of a ``(batch, x, y, c)`` tensor; pads with -inf."""
    x = as_tensor(x)
    if x.ndim == 3:
        out = maxpool2d(reshape(x, (1,) + x.shape), window, stride, padding)
        return reshape(out, out.shape[1:])
    kx, ky = _as_pair(window)
    sx, sy = _as_pair(stride)
    bsz, nx, ny, c = x.shape
    (px0, px1), (py0, py1) = resolve_padding(padding, (kx, ky), (nx, ny), (sx, sy))
    if kx > nx + px0 + px1 or ky > ny + py0 + py1:
        raise ValueError(f"pooling window {kx}x{ky} larger than padded input {nx + px0 + px1}x{ny + py0 + py1}")
    xp = np.pad(x.data, ((0, 0), (px0, px1), (py0, py1), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kx, ky), axis=(1, 2))[:, ::sx, ::sy]
    ox, oy = win.shape[1], win.shape[2]
    flat = win.reshape(bsz, ox, oy, c, kx * ky)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kx):
            for j in range(ky):
                hit = arg == i * ky + j
                if hit.any():
                    gxp[:, i:i + sx * (ox - 1) + 1:sx, j:j + sy * (oy - 1) + 1:sy, :] += g * hit
        return (gxp[:, px0:px0 + nx, py0:py0 + ny, :],)

    return record("maxpool2d", out, (x,), backward)


def fully_connected(x, w, b=None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(batch, d_in)`` and ``w`` of ``(d_in, d_out)``."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out
