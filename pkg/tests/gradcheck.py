"""Central finite-difference checks for engine ops (float64)."""

from __future__ import annotations

import numpy as np

from audiocnn.engine import ops
from audiocnn.engine.tensor import Parameter, Tensor, backward

H = 1e-6


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    # scalar <out, weights>; gives every output element its own random weight
    loss = Tensor(np.asarray((out.data * weights).sum()), (out,))
    loss._backward = lambda g: out.accumulate(g * weights)
    return loss


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, inputs: list[np.ndarray], rng: np.random.Generator, max_coords: int = 60) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``fn(*tensors) -> Tensor``. At most ``max_coords`` coordinates per input
    are probed numerically.
    """
    params = [Parameter(np.array(x, dtype=np.float64), name=f"in{i}") for i, x in enumerate(inputs)]
    out = fn(*params)
    weights = rng.standard_normal(out.shape)
    backward(_project(out, weights), params)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        return float((fn(*params).data * weights).sum())

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for k, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + H
            up = value()
            flat[i] = old - H
            down = value()
            flat[i] = old
            num[k] = (up - down) / (2 * H)
        worst = max(worst, relative_error(grad.reshape(-1)[coords], num))
    return worst


def away_from_zero(x: np.ndarray, gap: float = 1e-2) -> np.ndarray:
    # keep kinks (relu at 0, max ties) outside the finite-difference step
    return np.where(np.abs(x) < gap, np.sign(x + 1e-30) * gap + x, x)


def distinct(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # a random permutation of well-separated values, so pooling maxima are unique
    flat = np.linspace(-1, 1, x.size) * 3
    return rng.permutation(flat).reshape(x.shape)


def random_case(kind: str, rng: np.random.Generator):
    """Build ``(fn, inputs)`` for one random shape of layer ``kind``."""
    n = int(rng.integers(1, 3))
    h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((n, h, w, c))
    if kind == "conv2d":
        kh, kw = int(rng.integers(1, min(h, 4) + 1)), int(rng.integers(1, min(w, 4) + 1))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = str(rng.choice(["same", "valid"]))
        cout = int(rng.integers(1, 4))
        k = rng.standard_normal((kh, kw, c, cout))
        if rng.random() < 0.5:
            b = rng.standard_normal(cout)
            return (lambda x, k, b: ops.conv2d(x, k, b, stride, padding)), [x, k, b]
        return (lambda x, k: ops.conv2d(x, k, None, stride, padding)), [x, k]
    if kind == "dense":
        d, u = int(rng.integers(1, 12)), int(rng.integers(1, 8))
        return (lambda x, wt, b: ops.dense(x, wt, b)), [
            rng.standard_normal((n + 1, d)), rng.standard_normal((d, u)), rng.standard_normal(u)
        ]
    if kind == "relu":
        return ops.relu, [away_from_zero(x)]
    if kind == "sigmoid":
        return ops.sigmoid, [3 * x]
    if kind == "add":
        return ops.add, [x, rng.standard_normal(x.shape)]
    if kind == "concat":
        y = rng.standard_normal((n, h, w, int(rng.integers(1, 4))))
        return (lambda a, b: ops.concat([a, b], axis=-1)), [x, y]
    if kind == "flatten":
        return ops.flatten, [x]
    if kind in ("maxpool", "avgpool"):
        win = (int(rng.integers(1, min(h, 3) + 1)), int(rng.integers(1, min(w, 3) + 1)))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        padding = str(rng.choice(["same", "valid"]))
        op = ops.maxpool if kind == "maxpool" else ops.avgpool
        data = distinct(x, rng) if kind == "maxpool" else x
        return (lambda t: op(t, win, stride, padding)), [data]
    if kind in ("batchnorm_train", "batchnorm_inference"):
        training = kind == "batchnorm_train"
        layer = ops.BatchNormLayer(c, dtype=np.float64)
        layer.moving_mean = rng.standard_normal(c)
        layer.moving_variance = rng.uniform(0.5, 2.0, c)
        xs = rng.standard_normal((n + 1, h, w, c))

        def bn(t, scale, shift):
            layer.scale, layer.shift = scale, shift
            return ops.batchnorm_forward(t, layer, training=training)

        return bn, [xs, rng.uniform(0.5, 2.0, c), rng.standard_normal(c)]
    if kind == "bce":
        labels = rng.integers(0, 2, size=(n + 1, c + 1)).astype(np.float64)
        return (lambda s: ops.multilabel_bce(s, labels)), [rng.uniform(0.05, 0.95, (n + 1, c + 1))]
    raise ValueError(kind)


LAYER_KINDS = (
    "conv2d", "dense", "relu", "sigmoid", "add", "concat", "flatten",
    "maxpool", "avgpool", "batchnorm_train", "batchnorm_inference", "bce",
)
