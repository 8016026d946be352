"""Instantiate an :class:`ArchitectureSpec` as a trainable network."""

from __future__ import annotations

import numpy as np

from audiocnn.architectures import (
    BLOCK_KINDS,
    BOTTLENECK_LAYER,
    OUTPUT_LAYER,
    ArchitectureSpec,
    LayerSpec,
    count_costs,
    layer_output_shape,
)
from audiocnn.engine import ops
from audiocnn.engine.tensor import Parameter, Tensor


class EmbeddingError(ValueError):
    pass


class _Layer:
    def __init__(self, spec: LayerSpec, path: str):
        self.spec = spec
        self.path = path

    def parameters(self) -> list[Parameter]:
        return []

    def batchnorms(self) -> list[ops.BatchNormLayer]:
        return []


class _Conv(_Layer):
    def __init__(self, spec, path, cin, rng, dtype):
        super().__init__(spec, path)
        kh, kw = spec.kernel
        shape = (kh, kw, cin, spec.units)
        self.kernel = Parameter(ops.he_normal(rng, shape, kh * kw * cin, dtype), name=f"{path}/kernel")

    def parameters(self):
        return [self.kernel]

    def __call__(self, x, training):
        return ops.conv2d(x, self.kernel, None, self.spec.stride, self.spec.padding)


class _Dense(_Layer):
    def __init__(self, spec, path, din, rng, dtype):
        super().__init__(spec, path)
        self.weights = Parameter(ops.he_normal(rng, (din, spec.units), din, dtype), name=f"{path}/weights")
        self.bias = Parameter(np.zeros(spec.units, dtype=dtype), name=f"{path}/bias")

    def parameters(self):
        return [self.weights, self.bias]

    def __call__(self, x, training):
        return ops.dense(x, self.weights, self.bias)


class _BatchNorm(_Layer):
    def __init__(self, spec, path, channels, dtype, momentum, epsilon):
        super().__init__(spec, path)
        self.layer = ops.BatchNormLayer(channels, momentum, epsilon, dtype, name=path)

    def parameters(self):
        return self.layer.parameters()

    def batchnorms(self):
        return [self.layer]

    def __call__(self, x, training):
        return ops.batchnorm_forward(x, self.layer, training)


class _Stateless(_Layer):
    def __call__(self, x, training):
        s = self.spec
        if s.kind == "relu":
            return ops.relu(x)
        if s.kind == "sigmoid":
            return ops.sigmoid(x)
        if s.kind == "flatten":
            return ops.flatten(x)
        if s.kind == "maxpool":
            return ops.maxpool(x, s.kernel, s.stride, s.padding)
        if s.kind == "avgpool":
            return ops.avgpool(x, s.kernel, s.stride, s.padding)
        raise ValueError(s.kind)


class _Block(_Layer):
    def __init__(self, spec, path, branches):
        super().__init__(spec, path)
        self.branches = branches

    def parameters(self):
        return [p for b in self.branches for layer in b for p in layer.parameters()]

    def batchnorms(self):
        return [bn for b in self.branches for layer in b for bn in layer.batchnorms()]

    def __call__(self, x, training):
        outs = []
        for branch in self.branches:
            h = x
            for layer in branch:
                h = layer(h, training)
            outs.append(h)
        if self.spec.kind == "residual-block":
            return ops.add(outs[0], outs[1])
        return ops.concat(outs, axis=-1)


def _build(layers, shape, prefix, rng, dtype, bn_momentum, bn_epsilon):
    built = []
    for spec in layers:
        path = f"{prefix}{spec.name}"
        if spec.kind == "conv":
            layer = _Conv(spec, path, shape[-1], rng, dtype)
        elif spec.kind == "dense":
            layer = _Dense(spec, path, shape[-1], rng, dtype)
        elif spec.kind == "batchnorm":
            layer = _BatchNorm(spec, path, shape[-1], dtype, bn_momentum, bn_epsilon)
        elif spec.kind in BLOCK_KINDS:
            branches = []
            for i, b in enumerate(spec.branches):
                sub, _ = _build(b, shape, f"{path}/b{i}/", rng, dtype, bn_momentum, bn_epsilon)
                branches.append(sub)
            layer = _Block(spec, path, branches)
        else:
            layer = _Stateless(spec, path)
        built.append(layer)
        shape = layer_output_shape(spec, shape)
    return built, shape


class Network:
    """A spec's layer graph with live parameters and batchnorm statistics.

    Parameters are created in spec order from a single seeded generator, so
    ``Network(spec, seed)`` is reproducible bit for bit.
    """

    def __init__(
        self,
        spec: ArchitectureSpec,
        seed: int = 0,
        dtype=np.float32,
        bn_momentum: float = 0.99,
        bn_epsilon: float = 1e-3,
    ):
        count_costs(spec)  # raises on an invalid graph
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers, _ = _build(spec.layers, tuple(spec.input_shape), "", rng, self.dtype, bn_momentum, bn_epsilon)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def batchnorms(self) -> list[ops.BatchNormLayer]:
        return [bn for layer in self.layers for bn in layer.batchnorms()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        return Tensor(x)

    def forward(self, x, training: bool = False, stop_before: int | None = None) -> Tensor:
        h = self._as_input(x)
        for layer in self.layers[:stop_before]:
            h = layer(h, training)
        return h

    __call__ = forward

    def predict(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode class scores for a stack of patches ``[P, 96, 64]``."""
        return self._batched(patches, batch_size, None)

    def embedding_index(self) -> int:
        """Index of the layer whose input is the penultimate 'embedding'.

        With a bottleneck the embedding is the bottleneck's activation;
        otherwise it is whatever feeds the output dense layer.
        """
        names = [layer.spec.name for layer in self.layers]
        if BOTTLENECK_LAYER in names:
            return names.index(BOTTLENECK_LAYER) + 2  # after its relu
        if OUTPUT_LAYER not in names or self.layers[names.index(OUTPUT_LAYER)].spec.kind != "dense":
            raise EmbeddingError("no embedding layer")
        return names.index(OUTPUT_LAYER)

    def embed(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self._batched(patches, batch_size, self.embedding_index())

    def _batched(self, patches, batch_size, stop_before):
        patches = np.asarray(patches, dtype=self.dtype)
        outs = [
            self.forward(patches[i : i + batch_size], training=False, stop_before=stop_before).data
            for i in range(0, len(patches), batch_size)
        ]
        if not outs:
            width = self.spec.num_labels if stop_before is None else None
            return np.zeros((0, width or 0), dtype=self.dtype)
        return np.concatenate(outs, axis=0)
