"""Differentiable operations used by the shake-shake architectures.

All activations are NCHW. Convolution uses an im2col view built with
``sliding_window_view`` and a single ``tensordot``; the backward pass scatters
column gradients back with one strided add per kernel tap.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .tensor import Tensor, as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_relu_masks: list | None = None


@contextlib.contextmanager
def record_relu_masks():
    """Collect a hash of every ReLU activation pattern computed inside the block."""
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-d cross-correlation with zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigError("conv2d: kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = _pad(x.data, padding)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,Cout
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def _backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # N,Ho,Wo,Cin,kh,kw
        dxp = np.zeros_like(xp)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[..., i, j].transpose(
                    0, 3, 1, 2
                )
        gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _backward, "conv2d")


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the running statistics are updated in place with an
    exponential moving average (the variance estimate is the unbiased one).
    """
    x = as_tensor(x)
    if eps <= 0:
        raise ConfigError("batchnorm2d: eps must be positive")
    n, c, h, w = x.shape
    m = n * h * w
    shape = (1, c, 1, 1)
    gamma = scale.data.reshape(shape)
    if training:
        if m < 2:
            raise ConfigError("batchnorm2d: training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma + shift.data.reshape(shape)

    def _backward(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if training:
            gx = (inv_std.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, gscale, gshift

    return make_node(out, (x, scale, shift), _backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(hash(np.packbits(mask).tobytes()))
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def avgpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ConfigError(f"avgpool2d: window {window} larger than input {h}x{w}")
    if window < 1 or stride < 1:
        raise ConfigError("avgpool2d: window and stride must be positive")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if window == 1:
        out = np.ascontiguousarray(x.data[:, :, ::stride, ::stride][:, :, :ho, :wo])
    else:
        win = sliding_window_view(x.data, (window, window), axis=(2, 3))
        out = win[:, :, ::stride, ::stride][:, :, :ho, :wo].mean(axis=(4, 5))
    area = window * window
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def _backward(g):
        gx = np.zeros_like(x.data)
        share = g / area
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + hs : stride, j : j + ws : stride] += share
        return (gx,)

    return make_node(out, (x,), _backward, "avgpool2d")


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = a[..., src_y, src_x]
    return out


def pixel_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Translate content by (dy, dx) pixels (positive = down/right), zero-filling."""
    x = as_tensor(x)
    return make_node(_shift(x.data, dy, dx), (x,), lambda g: (_shift(g, -dy, -dx),), "pixel_shift")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ConfigError("concat_channels expects 4-d tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ConfigError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_node(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ConfigError("linear: bias length must equal output features")
        out = out + bias.data

    def _backward(g):
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _backward, "linear")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "mul")


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_node(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under softmax(``logits``).

    ``reduction`` is ``"mean"`` (training default) or ``"sum"``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if k < 2:
        raise ConfigError("softmax_cross_entropy needs at least 2 classes")
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), labels]
    denom = n if reduction == "mean" else 1
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    loss = np.asarray(nll.sum() / denom, dtype=logits.dtype)

    def _backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), labels] -= 1
        return (p * (g / denom),)

    return make_node(loss, (logits,), _backward, "softmax_cross_entropy")
