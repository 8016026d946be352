"""Declarative layer graphs for the five audio networks and their costs.

A spec is an immutable tree of :class:`LayerSpec`. Blocks
(``residual-block``, ``inception-block``, ``concat``) hold parallel
branches: residual blocks sum ``branches[0]`` with ``branches[1]`` (an
empty second branch is the identity shortcut), the other two concatenate
their branch outputs along channels.

Cost convention: headline ``weights`` are kernel and dense matrices only;
biases and batchnorm scale/shift go in ``biases_bn``. ``multiplies`` are
multiply-accumulates per example for conv and dense layers; pooling,
activations and batchnorm count zero.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

INPUT_SHAPE = (96, 64, 1)

LAYER_KINDS = (
    "conv",
    "maxpool",
    "avgpool",
    "dense",
    "relu",
    "sigmoid",
    "batchnorm",
    "flatten",
    "residual-block",
    "inception-block",
    "concat",
)
BLOCK_KINDS = ("residual-block", "inception-block", "concat")
OUTPUT_LAYER = "output"
BOTTLENECK_LAYER = "bottleneck"


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: str | None = None
    units: int | None = None
    branches: tuple[tuple["LayerSpec", ...], ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        spatial = self.kind in ("conv", "maxpool", "avgpool")
        if spatial != (self.kernel is not None):
            raise ArchitectureError(f"{self.name}: kernel is only meaningful for conv/pool")
        if self.kind in ("conv", "dense") and not self.units:
            raise ArchitectureError(f"{self.name}: {self.kind} needs units")
        if self.kind in BLOCK_KINDS and not self.branches:
            raise ArchitectureError(f"{self.name}: block without branches")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "name": self.name}
        if self.kernel is not None:
            d["kernel"] = list(self.kernel)
            d["stride"] = list(self.stride)
            d["padding"] = self.padding
        if self.units is not None:
            d["units"] = self.units
        if self.branches:
            d["branches"] = [[layer.to_dict() for layer in b] for b in self.branches]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            name=d["name"],
            kernel=tuple(d["kernel"]) if "kernel" in d else None,
            stride=tuple(d["stride"]) if "stride" in d else None,
            padding=d.get("padding"),
            units=d.get("units"),
            branches=tuple(tuple(cls.from_dict(x) for x in b) for b in d.get("branches", [])),
        )


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    num_labels: int
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    bottleneck_units: int | None = None
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "num_labels": self.num_labels,
            "bottleneck_units": self.bottleneck_units,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            name=d["name"],
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            num_labels=d["num_labels"],
            input_shape=tuple(d["input_shape"]),
            bottleneck_units=d.get("bottleneck_units"),
            notes=d.get("notes", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def walk(layers, prefix: str = "") -> Iterator[tuple[str, LayerSpec]]:
    """Yield ``(path, layer)`` depth-first, blocks before their children."""
    for layer in layers:
        path = f"{prefix}{layer.name}"
        yield path, layer
        for b, branch in enumerate(layer.branches):
            yield from walk(branch, f"{path}/b{b}/")


# -- small constructors ----------------------------------------------------


def conv(name, units, kernel=(3, 3), stride=(1, 1), padding="same") -> LayerSpec:
    return LayerSpec("conv", name, kernel=tuple(kernel), stride=tuple(stride), padding=padding, units=units)


def conv_bn_relu(name, units, kernel=(3, 3), stride=(1, 1), padding="same") -> list[LayerSpec]:
    return [
        conv(name, units, kernel, stride, padding),
        LayerSpec("batchnorm", f"{name}_bn"),
        LayerSpec("relu", f"{name}_relu"),
    ]


def pool(kind, name, window, stride, padding) -> LayerSpec:
    return LayerSpec(kind, name, kernel=tuple(window), stride=tuple(stride), padding=padding)


def dense(name, units) -> LayerSpec:
    return LayerSpec("dense", name, units=units)


def _head(num_labels: int) -> list[LayerSpec]:
    return [dense(OUTPUT_LAYER, num_labels), LayerSpec("sigmoid", "output_sigmoid")]


# -- builders --------------------------------------------------------------


def build_fully_connected(num_layers: int = 3, units: int = 1000, num_labels: int = 3087) -> ArchitectureSpec:
    if num_layers < 1 or units < 1:
        raise ArchitectureError("fully connected net needs N >= 1 layers of M >= 1 units")
    layers = [LayerSpec("flatten", "flatten")]
    for i in range(num_layers):
        layers += [dense(f"fc{i + 1}", units), LayerSpec("relu", f"fc{i + 1}_relu")]
    return ArchitectureSpec(f"fc-{num_layers}x{units}", tuple(layers + _head(num_labels)), num_labels)


VGG_E = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))


def build_vgg_audio(num_labels: int = 3087) -> ArchitectureSpec:
    layers: list[LayerSpec] = []
    for stage, (width, repeats) in enumerate(VGG_E, start=1):
        for r in range(repeats):
            layers += conv_bn_relu(f"conv{stage}_{r + 1}", width)
        layers.append(pool("maxpool", f"pool{stage}", (2, 2), (2, 2), "valid"))
    layers.append(LayerSpec("flatten", "flatten"))
    for i in (6, 7):
        layers += [dense(f"fc{i}", 4096), LayerSpec("relu", f"fc{i}_relu")]
    return ArchitectureSpec(
        "vgg-audio",
        tuple(layers + _head(num_labels)),
        num_labels,
        notes="configuration E; same-padded 3x3 convs; 2x2/2 valid maxpools",
    )


def build_alexnet_audio(num_labels: int = 3087) -> ArchitectureSpec:
    layers: list[LayerSpec] = []
    layers += conv_bn_relu("conv1", 96, (11, 11), (2, 1))
    layers.append(pool("maxpool", "pool1", (3, 3), (2, 2), "valid"))
    layers += conv_bn_relu("conv2", 256, (5, 5))
    layers.append(pool("maxpool", "pool2", (3, 3), (2, 2), "valid"))
    layers += conv_bn_relu("conv3", 384)
    layers += conv_bn_relu("conv4", 384)
    layers += conv_bn_relu("conv5", 256)
    layers.append(pool("maxpool", "pool5", (3, 3), (2, 2), "valid"))
    layers.append(LayerSpec("flatten", "flatten"))
    for i in (6, 7):
        layers += [dense(f"fc{i}", 4096), LayerSpec("relu", f"fc{i}_relu")]
    return ArchitectureSpec(
        "alexnet-audio",
        tuple(layers + _head(num_labels)),
        num_labels,
        notes=(
            "same-padded convs, valid 3x3/2 maxpools, no filter grouping. Published "
            "37.3M weights / 767M multiplies could not be reconstructed: with the "
            "original 4096-unit dense stack the flattened 5x7x256 map alone feeds "
            "36.7M weights into fc6."
        ),
    )


RESNET50_STAGES = ((64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2))


def _bottleneck_block(name, mid, out, stride, project) -> list[LayerSpec]:
    main = (
        *conv_bn_relu(f"{name}_a", mid, (1, 1), (stride, stride)),
        *conv_bn_relu(f"{name}_b", mid, (3, 3)),
        conv(f"{name}_c", out, (1, 1)),
        LayerSpec("batchnorm", f"{name}_c_bn"),
    )
    shortcut: tuple[LayerSpec, ...] = ()
    if project:
        shortcut = (
            conv(f"{name}_proj", out, (1, 1), (stride, stride)),
            LayerSpec("batchnorm", f"{name}_proj_bn"),
        )
    return [
        LayerSpec("residual-block", name, branches=(main, shortcut)),
        LayerSpec("relu", f"{name}_relu"),
    ]


def build_resnet50_audio(num_labels: int = 3087) -> ArchitectureSpec:
    layers: list[LayerSpec] = conv_bn_relu("conv1", 64, (7, 7), (1, 1))
    layers.append(pool("maxpool", "pool1", (3, 3), (2, 2), "same"))
    for s, (mid, out, blocks, stride) in enumerate(RESNET50_STAGES, start=2):
        for b in range(blocks):
            first = b == 0
            layers += _bottleneck_block(f"res{s}{chr(ord('a') + b)}", mid, out, stride if first else 1, first)
    layers.append(pool("avgpool", "avgpool", (6, 4), (1, 1), "valid"))
    layers.append(LayerSpec("flatten", "flatten"))
    return ArchitectureSpec(
        "resnet50-audio",
        tuple(layers + _head(num_labels)),
        num_labels,
        notes="7x7 conv1 at stride 1; projection shortcuts stride on the first 1x1",
    )


def _branch(*groups) -> tuple[LayerSpec, ...]:
    out: list[LayerSpec] = []
    for g in groups:
        out += g if isinstance(g, list) else [g]
    return tuple(out)


def _cbr(name, units, kernel=(1, 1), stride=(1, 1), padding="same"):
    return conv_bn_relu(name, units, kernel, stride, padding)


def _avg3(name):
    return pool("avgpool", name, (3, 3), (1, 1), "same")


def _max3s2(name):
    return pool("maxpool", name, (3, 3), (2, 2), "valid")


def _mixed_5(name, pool_units):
    return LayerSpec(
        "inception-block",
        name,
        branches=(
            _branch(_cbr(f"{name}_b0_1x1", 64)),
            _branch(_cbr(f"{name}_b1_1x1", 48), _cbr(f"{name}_b1_5x5", 64, (5, 5))),
            _branch(
                _cbr(f"{name}_b2_1x1", 64),
                _cbr(f"{name}_b2_3x3a", 96, (3, 3)),
                _cbr(f"{name}_b2_3x3b", 96, (3, 3)),
            ),
            _branch(_avg3(f"{name}_b3_pool"), _cbr(f"{name}_b3_1x1", pool_units)),
        ),
    )


def _mixed_6a(name):
    return LayerSpec(
        "inception-block",
        name,
        branches=(
            _branch(_cbr(f"{name}_b0_3x3", 384, (3, 3), (2, 2), "valid")),
            _branch(
                _cbr(f"{name}_b1_1x1", 64),
                _cbr(f"{name}_b1_3x3a", 96, (3, 3)),
                _cbr(f"{name}_b1_3x3b", 96, (3, 3), (2, 2), "valid"),
            ),
            _branch(_max3s2(f"{name}_b2_pool")),
        ),
    )


def _mixed_6(name, width):
    return LayerSpec(
        "inception-block",
        name,
        branches=(
            _branch(_cbr(f"{name}_b0_1x1", 192)),
            _branch(
                _cbr(f"{name}_b1_1x1", width),
                _cbr(f"{name}_b1_1x7", width, (1, 7)),
                _cbr(f"{name}_b1_7x1", 192, (7, 1)),
            ),
            _branch(
                _cbr(f"{name}_b2_1x1", width),
                _cbr(f"{name}_b2_7x1a", width, (7, 1)),
                _cbr(f"{name}_b2_1x7a", width, (1, 7)),
                _cbr(f"{name}_b2_7x1b", width, (7, 1)),
                _cbr(f"{name}_b2_1x7b", 192, (1, 7)),
            ),
            _branch(_avg3(f"{name}_b3_pool"), _cbr(f"{name}_b3_1x1", 192)),
        ),
    )


def _mixed_7a(name):
    return LayerSpec(
        "inception-block",
        name,
        branches=(
            _branch(_cbr(f"{name}_b0_1x1", 192), _cbr(f"{name}_b0_3x3", 320, (3, 3), (2, 2), "valid")),
            _branch(
                _cbr(f"{name}_b1_1x1", 192),
                _cbr(f"{name}_b1_1x7", 192, (1, 7)),
                _cbr(f"{name}_b1_7x1", 192, (7, 1)),
                _cbr(f"{name}_b1_3x3", 192, (3, 3), (2, 2), "valid"),
            ),
            _branch(_max3s2(f"{name}_b2_pool")),
        ),
    )


def _split_1x3_3x1(name):
    return LayerSpec(
        "concat",
        name,
        branches=(_branch(_cbr(f"{name}_1x3", 384, (1, 3))), _branch(_cbr(f"{name}_3x1", 384, (3, 1)))),
    )


def _mixed_7(name):
    return LayerSpec(
        "inception-block",
        name,
        branches=(
            _branch(_cbr(f"{name}_b0_1x1", 320)),
            _branch(_cbr(f"{name}_b1_1x1", 384), _split_1x3_3x1(f"{name}_b1_split")),
            _branch(
                _cbr(f"{name}_b2_1x1", 448),
                _cbr(f"{name}_b2_3x3", 384, (3, 3)),
                _split_1x3_3x1(f"{name}_b2_split"),
            ),
            _branch(_avg3(f"{name}_b3_pool"), _cbr(f"{name}_b3_1x1", 192)),
        ),
    )


def build_inception_v3_audio(num_labels: int = 3087, keep_stem_1x1: bool = False) -> ArchitectureSpec:
    """Inception V3 on a 96x64x1 patch.

    The stem loses its first four conv layers (3x3/2, 3x3, 3x3, 1x1/80) and
    the maxpool between them, so the 3x3/192 valid conv reads the
    single-channel patch directly. That keeps the 46x30 -> 22x14 -> 10x6
    grid and lands at ~27.9M weights / ~4.65B multiplies.
    ``keep_stem_1x1=True`` keeps the 1x1/80 conv (cut right after the first
    maxpool instead), which costs ~28.0M / ~5.44B.
    """
    layers: list[LayerSpec] = []
    if keep_stem_1x1:
        layers += _cbr("stem_1x1", 80)
    layers += _cbr("stem_3x3", 192, (3, 3), padding="valid")
    layers.append(_max3s2("stem_pool"))
    layers += [_mixed_5("mixed_5b", 32), _mixed_5("mixed_5c", 64), _mixed_5("mixed_5d", 64)]
    layers.append(_mixed_6a("mixed_6a"))
    layers += [_mixed_6(f"mixed_6{c}", w) for c, w in zip("bcde", (128, 160, 160, 192))]
    layers.append(_mixed_7a("mixed_7a"))
    layers += [_mixed_7("mixed_7b"), _mixed_7("mixed_7c")]
    layers.append(pool("avgpool", "avgpool", (10, 6), (1, 1), "valid"))
    layers.append(LayerSpec("flatten", "flatten"))
    stem = "1x1/80, 3x3/192 valid" if keep_stem_1x1 else "3x3/192 valid"
    return ArchitectureSpec(
        "inception-v3-audio" + ("-stem1x1" if keep_stem_1x1 else ""),
        tuple(layers + _head(num_labels)),
        num_labels,
        notes=f"stem kept: {stem}, 3x3/2 maxpool valid; no auxiliary head; reductions valid-padded",
    )


BUILDERS = {
    "fc": lambda n: build_fully_connected(3, 1000, n),
    "alexnet": build_alexnet_audio,
    "vgg": build_vgg_audio,
    "inception": build_inception_v3_audio,
    "resnet": build_resnet50_audio,
}


def build(name: str, num_labels: int) -> ArchitectureSpec:
    try:
        return BUILDERS[name](num_labels)
    except KeyError:
        raise ArchitectureError(f"unknown architecture {name!r}; choose from {sorted(BUILDERS)}") from None


# -- transforms -------------------------------------------------------------


def with_bottleneck(spec: ArchitectureSpec, units: int = 128) -> ArchitectureSpec:
    layers = list(spec.layers)
    if len(layers) < 2 or layers[-2].kind != "dense" or layers[-1].kind != "sigmoid":
        raise ArchitectureError("no output head")
    if spec.bottleneck_units is not None:
        raise ArchitectureError("spec already has a bottleneck")
    insert = [dense(BOTTLENECK_LAYER, units), LayerSpec("relu", f"{BOTTLENECK_LAYER}_relu")]
    return replace(
        spec,
        name=f"{spec.name}+bneck{units}",
        layers=tuple(layers[:-2] + insert + layers[-2:]),
        bottleneck_units=units,
    )


def _scale(units: int, factor: float) -> int:
    return max(1, math.ceil(units * factor - 1e-9))


def _shrink_layers(layers, factor) -> tuple[LayerSpec, ...]:
    out = []
    for layer in layers:
        units = layer.units
        if layer.kind in ("conv", "dense") and layer.name not in (OUTPUT_LAYER, BOTTLENECK_LAYER):
            units = _scale(units, factor)
        branches = tuple(_shrink_layers(b, factor) for b in layer.branches)
        out.append(replace(layer, units=units, branches=branches))
    return tuple(out)


def shrink(spec: ArchitectureSpec, width_factor: float) -> ArchitectureSpec:
    """Scale every hidden channel/unit count by ``width_factor``, rounding up.

    The output layer keeps ``num_labels`` units and a bottleneck keeps its
    declared width so embedding dimensions stay comparable across widths.
    """
    if not 0.0 < width_factor <= 1.0:
        raise ArchitectureError("width_factor must lie in (0, 1]")
    if width_factor == 1.0:
        return spec
    return replace(
        spec,
        name=f"{spec.name}@{width_factor:g}",
        layers=_shrink_layers(spec.layers, width_factor),
    )


# -- shape inference and costs ---------------------------------------------


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    weights: int
    biases_bn: int
    multiplies: int


@dataclass(frozen=True)
class CostReport:
    architecture: str
    layers: tuple[LayerCost, ...]
    paddings: str = ""
    notes: str = ""
    totals: dict = field(default_factory=dict)

    @property
    def weights(self) -> int:
        return sum(c.weights for c in self.layers)

    @property
    def biases_bn(self) -> int:
        return sum(c.biases_bn for c in self.layers)

    @property
    def multiplies(self) -> int:
        return sum(c.multiplies for c in self.layers)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "output_shape", "weights", "biases_bn", "multiplies"])
        for c in self.layers:
            w.writerow([c.name, "x".join(map(str, c.output_shape)), c.weights, c.biases_bn, c.multiplies])
        w.writerow(["TOTAL", "", self.weights, self.biases_bn, self.multiplies])
        return buf.getvalue()


def _spatial_out(size, k, s, padding) -> int:
    if padding == "same":
        return -(-size // s)
    if k > size:
        raise ArchitectureError("invalid architecture: kernel exceeds input")
    return (size - k) // s + 1


def _infer(layers, shape, prefix, rows) -> tuple[int, ...]:
    for layer in layers:
        path = f"{prefix}{layer.name}"
        weights = biases = mults = 0
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ArchitectureError(f"invalid architecture: conv {path} on {shape}")
            h, w, c = shape
            kh, kw = layer.kernel
            sh, sw = layer.stride
            shape = (_spatial_out(h, kh, sh, layer.padding), _spatial_out(w, kw, sw, layer.padding), layer.units)
            weights = kh * kw * c * layer.units
            mults = shape[0] * shape[1] * weights
        elif layer.kind in ("maxpool", "avgpool"):
            h, w, c = shape
            kh, kw = layer.kernel
            sh, sw = layer.stride
            shape = (_spatial_out(h, kh, sh, layer.padding), _spatial_out(w, kw, sw, layer.padding), c)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ArchitectureError(f"invalid architecture: dense {path} on {shape}")
            weights = shape[0] * layer.units
            biases = layer.units
            mults = weights
            shape = (layer.units,)
        elif layer.kind == "batchnorm":
            biases = 2 * shape[-1]
        elif layer.kind == "flatten":
            shape = (math.prod(shape),)
        elif layer.kind in BLOCK_KINDS:
            rows.append(LayerCost(path, layer.kind, (), 0, 0, 0))
            block_row = len(rows) - 1
            outs = [_infer(b, shape, f"{path}/b{i}/", rows) for i, b in enumerate(layer.branches)]
            if layer.kind == "residual-block":
                if len(outs) != 2 or outs[0] != outs[1]:
                    raise ArchitectureError(f"invalid architecture: residual shapes {outs} in {path}")
                shape = outs[0]
            else:
                if len({o[:-1] for o in outs}) != 1:
                    raise ArchitectureError(f"invalid architecture: concat shapes {outs} in {path}")
                shape = (*outs[0][:-1], sum(o[-1] for o in outs))
            rows[block_row] = replace(rows[block_row], output_shape=shape)
            continue
        rows.append(LayerCost(path, layer.kind, tuple(shape), weights, biases, mults))
    return tuple(shape)


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape of a single layer (or block) applied to ``shape``."""
    return _infer((layer,), tuple(shape), "", [])


def infer_shapes(spec: ArchitectureSpec) -> tuple[int, ...]:
    return count_costs(spec).layers[-1].output_shape


def count_costs(spec: ArchitectureSpec) -> CostReport:
    rows: list[LayerCost] = []
    out = _infer(spec.layers, tuple(spec.input_shape), "", rows)
    if out != (spec.num_labels,):
        raise ArchitectureError(f"invalid architecture: output shape {out}, expected ({spec.num_labels},)")
    if spec.layers[-1].kind != "sigmoid":
        raise ArchitectureError("invalid architecture: final layer must be sigmoid")
    paddings = sorted({layer.padding for _, layer in walk(spec.layers) if layer.padding})
    return CostReport(spec.name, tuple(rows), paddings=",".join(paddings), notes=spec.notes)


def output_head_weights(spec: ArchitectureSpec) -> int:
    """Weights from the last pooled/flattened features to the labels."""
    report = count_costs(spec)
    names = {OUTPUT_LAYER, BOTTLENECK_LAYER}
    return sum(c.weights for c in report.layers if c.name in names)


PAPER_COSTS = {
    # architecture: (weights, multiplies) at 3087 labels
    "fc": (11.2e6, 11.2e6),
    "alexnet": (37.3e6, 767e6),
    "vgg": (62e6, 2.4e9),
    "inception": (28e6, 4.7e9),
    "resnet": (30e6, 1.9e9),
}
