"""Differentiable ops over NHWC tensors.

Convolution and pooling lower to shifted slices of a padded input: one
slice per kernel offset. That keeps the inner loop at ``kh * kw``
vectorised numpy calls and lets the convolution reduce to a single BLAS
matmul in each direction.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from audiocnn.engine.tensor import Parameter, Tensor

BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def output_size(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-size // s)
    if padding == "valid":
        if k > size:
            raise ShapeError("kernel exceeds input")
        return (size - k) // s + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pad_amounts(size: int, k: int, s: int, padding: str) -> tuple[int, int, int]:
    out = output_size(size, k, s, padding)
    if padding == "valid":
        return out, 0, 0
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _geometry(shape, kernel, stride, padding):
    _, h, w, _ = shape
    kh, kw = kernel
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise ShapeError("strides must be >= 1")
    ho, pt, pb = _pad_amounts(h, kh, sh, padding)
    wo, pl, pr = _pad_amounts(w, kw, sw, padding)
    return ho, wo, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, sh: int, sw: int) -> np.ndarray:
    return xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]


def _needs_pad(pads) -> bool:
    return any(a or b for a, b in pads)


def _unpad(xp: np.ndarray, pads) -> np.ndarray:
    (_, _), (pt, pb), (pl, pr), (_, _) = pads
    return xp[:, pt : xp.shape[1] - pb, pl : xp.shape[2] - pr, :]


# -- elementwise ---------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    out = Tensor(y, (x,))

    def _backward(g):
        x.accumulate(g * (y > 0))

    out._backward = _backward
    return out


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # two branches so exp() never sees a large positive argument
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = Tensor(s, (x,))

    def _backward(g):
        x.accumulate(g * s * (1 - s))

    out._backward = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b))

    def _backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.copy() if a.requires_grad else g)

    out._backward = _backward
    return out


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = Tensor(data, tuple(tensors))

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(lo), int(hi))
                t.accumulate(g[tuple(index)])

    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1), (x,))

    def _backward(g):
        x.accumulate(g.reshape(shape))

    out._backward = _backward
    return out


# -- affine --------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} vs weights {weights.shape}")
    y = x.data @ weights.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)
    out = Tensor(y, parents)

    def _backward(g):
        if weights.requires_grad:
            weights.accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ weights.data.T)

    out._backward = _backward
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Rows of ``kh*kw*C`` patch values, one per output position."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * c)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1),
    padding: str = "same",
) -> Tensor:
    """Cross-correlation of ``x [N,H,W,Cin]`` with ``kernel [kh,kw,Cin,Cout]``.

    The input gradient is itself a stride-1 correlation of the (dilated,
    fully padded) output gradient with the flipped kernel, which keeps the
    backward pass a gather plus one matmul.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got {x.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} vs kernel {cin}")
    sh, sw = _pair(stride)
    ho, wo, pads = _geometry(x.shape, (kh, kw), (sh, sw), padding)
    n = x.shape[0]
    xp = np.pad(x.data, pads) if _needs_pad(pads) else x.data
    pointwise = kh == kw == 1
    if pointwise:
        cols = _window(xp, 0, 0, ho, wo, sh, sw).reshape(n * ho * wo, cin)
    else:
        cols = _im2col(xp, kh, kw, sh, sw)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    y = cols @ wmat
    if bias is not None:
        y += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(y.reshape(n, ho, wo, cout), parents)
    _, hp, wp, _ = xp.shape

    def _backward(g):
        g2 = g.reshape(-1, cout)
        if kernel.requires_grad:
            kernel.accumulate(cols.T @ g2)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))
        if not x.requires_grad:
            return
        if pointwise:
            d = (g2 @ wmat.T).reshape(n, ho, wo, cin)
            if sh == sw == 1 and (hp, wp) == (ho, wo):
                x.accumulate(_unpad(d, pads))
                return
            dxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            _window(dxp, 0, 0, ho, wo, sh, sw)[...] = d
            x.accumulate(_unpad(dxp, pads))
            return
        if sh == sw == 1:
            gd = g
        else:
            gd = np.zeros((n, (ho - 1) * sh + 1, (wo - 1) * sw + 1, cout), dtype=g.dtype)
            gd[:, ::sh, ::sw, :] = g
        extra_h = hp - ((ho - 1) * sh + kh)
        extra_w = wp - ((wo - 1) * sw + kw)
        gp = np.pad(gd, ((0, 0), (kh - 1, kh - 1 + extra_h), (kw - 1, kw - 1 + extra_w), (0, 0)))
        flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
        dxp = (_im2col(gp, kh, kw, 1, 1) @ flipped).reshape(n, hp, wp, cin)
        x.accumulate(_unpad(dxp, pads) if _needs_pad(pads) else dxp)

    out._backward = _backward
    return out


# -- pooling -------------------------------------------------------------


def maxpool(x: Tensor, window=(2, 2), stride=None, padding: str = "valid") -> Tensor:
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    ho, wo, pads = _geometry(x.shape, (kh, kw), (sh, sw), padding)
    if _needs_pad(pads):
        xp = np.pad(x.data, pads, constant_values=-np.inf)
    else:
        xp = x.data
    y = None
    for i in range(kh):
        for j in range(kw):
            w = _window(xp, i, j, ho, wo, sh, sw)
            y = w.copy() if y is None else np.maximum(y, w)
    out = Tensor(y, (x,))
    xp_shape = xp.shape

    def _backward(g):
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        taken = np.zeros(y.shape, dtype=bool)
        # route each output gradient to the first maximal input only
        for i in range(kh):
            for j in range(kw):
                hit = (_window(xp, i, j, ho, wo, sh, sw) == y) & ~taken
                taken |= hit
                _window(dxp, i, j, ho, wo, sh, sw)[...] += g * hit
        x.accumulate(_unpad(dxp, pads))

    out._backward = _backward
    return out


def avgpool(x: Tensor, window=(2, 2), stride=None, padding: str = "valid") -> Tensor:
    """Window mean; with ``same`` padding the padded cells are not counted."""
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    ho, wo, pads = _geometry(x.shape, (kh, kw), (sh, sw), padding)
    padded = _needs_pad(pads)
    xp = np.pad(x.data, pads) if padded else x.data
    total = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            total += _window(xp, i, j, ho, wo, sh, sw)
    if padded:
        ones = np.pad(np.ones((1, x.shape[1], x.shape[2], 1), dtype=x.dtype), pads)
        count = np.zeros((1, ho, wo, 1), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                count += _window(ones, i, j, ho, wo, sh, sw)
    else:
        count = np.asarray(kh * kw, dtype=x.dtype)
    out = Tensor(total / count, (x,))
    xp_shape = xp.shape

    def _backward(g):
        share = g / count
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                _window(dxp, i, j, ho, wo, sh, sw)[...] += share
        x.accumulate(_unpad(dxp, pads))

    out._backward = _backward
    return out


# -- normalization -------------------------------------------------------


class BatchNormLayer:
    """Per-channel batch normalization over the last axis.

    ``moving_mean``/``moving_variance`` are plain arrays, not parameters:
    they are updated in training mode and are the only statistics used in
    inference mode.
    """

    def __init__(
        self,
        channels: int,
        momentum: float = 0.99,
        epsilon: float = 1e-3,
        dtype=np.float32,
        name: str = "bn",
    ):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.scale = Parameter(np.ones(channels, dtype=dtype), name=f"{name}/scale")
        self.shift = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}/shift")
        self.moving_mean = np.zeros(channels, dtype=dtype)
        self.moving_variance = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self.training = True
        self.name = name

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.scale, self.shift]


def _channel_sum(a2: np.ndarray, ones: np.ndarray) -> np.ndarray:
    # BLAS gemv is several times faster than ndarray.sum(axis=0) here
    return ones @ a2


def batchnorm_forward(x: Tensor, layer: BatchNormLayer, training: bool | None = None) -> Tensor:
    training = layer.training if training is None else training
    channels = layer.channels
    if x.shape[-1] != channels:
        raise ShapeError(f"batchnorm: {x.shape[-1]} channels vs layer {channels}")
    scale, shift = layer.scale, layer.shift
    x2 = x.data.reshape(-1, channels)
    count = x2.shape[0]
    ones = np.ones(count, dtype=x.dtype)
    if not training:
        inv_std = (1.0 / np.sqrt(layer.moving_variance + layer.epsilon)).astype(x.dtype, copy=False)
        xhat = (x.data - layer.moving_mean) * inv_std
        out = Tensor(xhat * scale.data + shift.data, (x, scale, shift))

        def _backward_inference(g):
            g2 = g.reshape(-1, channels)
            if scale.requires_grad:
                scale.accumulate(np.einsum("ij,ij->j", g2, xhat.reshape(-1, channels)))
            if shift.requires_grad:
                shift.accumulate(_channel_sum(g2, ones))
            if x.requires_grad:
                x.accumulate(g * (scale.data * inv_std))

        out._backward = _backward_inference
        return out

    if x.shape[0] < 2:
        raise ValueError("degenerate batch")
    mean = _channel_sum(x2, ones) / count
    centered = x.data - mean
    c2 = centered.reshape(-1, channels)
    var = np.einsum("ij,ij->j", c2, c2) / count
    inv_std = (1.0 / np.sqrt(var + layer.epsilon)).astype(x.dtype, copy=False)
    xhat = centered
    xhat *= inv_std
    m = layer.momentum
    layer.moving_mean = (m * layer.moving_mean + (1 - m) * mean).astype(layer.moving_mean.dtype)
    layer.moving_variance = (m * layer.moving_variance + (1 - m) * var).astype(
        layer.moving_variance.dtype
    )
    out = Tensor(xhat * scale.data + shift.data, (x, scale, shift))

    def _backward(g):
        g2 = g.reshape(-1, channels)
        g_xhat_sum = np.einsum("ij,ij->j", g2, xhat.reshape(-1, channels))
        g_sum = _channel_sum(g2, ones)
        if scale.requires_grad:
            scale.accumulate(g_xhat_sum)
        if shift.requires_grad:
            shift.accumulate(g_sum)
        if x.requires_grad:
            k = (scale.data * inv_std / count).astype(g.dtype, copy=False)
            dx = xhat * (-g_xhat_sum)
            dx += count * g
            dx -= g_sum
            dx *= k
            x.accumulate(dx)

    out._backward = _backward
    return out


# -- loss ----------------------------------------------------------------


def multilabel_bce(scores: Tensor, targets) -> Tensor:
    """Mean over examples of the summed per-class binary cross-entropy.

    Scores are clamped to ``[1e-7, 1 - 1e-7]``; the clamp is transparent to
    the gradient so saturated wrong predictions still receive a signal.
    """
    y = np.asarray(targets)
    if y.shape != scores.shape:
        raise ShapeError(f"bce: scores {scores.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("invalid target")
    s = np.clip(scores.data.astype(np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    y64 = y.astype(np.float64)
    n = scores.shape[0]
    per_example = -(y64 * np.log(s) + (1 - y64) * np.log1p(-s)).sum(axis=1)
    loss = Tensor(np.asarray(per_example.mean(), dtype=scores.dtype), (scores,))

    def _backward(g):
        ds = (s - y64) / (s * (1 - s)) / n
        scores.accumulate((g * ds).astype(scores.dtype))

    loss._backward = _backward
    return loss


def bce_value(scores: np.ndarray, targets: np.ndarray) -> float:
    s = np.clip(np.asarray(scores, dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    y = np.asarray(targets, dtype=np.float64)
    return float(-(y * np.log(s) + (1 - y) * np.log1p(-s)).sum(axis=1).mean())


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
