"""The DANN-style ConvNet: feature extractor followed by a dense classifier.

A model is a plain ordered list of :class:`LayerSpec` records. Forward passes
can capture the post-activation feature map of any conv layer and can zero a
subset of its channels (the masked forward used to cross-check pruning).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor


class LayerKind(str, enum.Enum):
    CONV = "conv"
    RELU = "relu"
    MAXPOOL = "maxpool"
    FLATTEN = "flatten"
    DENSE = "dense"


@dataclass
class LayerSpec:
    kind: LayerKind
    layer_id: str
    params: dict[str, Tensor] = field(default_factory=dict)
    hyper: dict[str, int] = field(default_factory=dict)


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    class_count: int
    prunable_layers: list[str]
    seed: int | None = None

    def __post_init__(self):
        ids = [layer.layer_id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"layer ids must be unique, got {ids}")
        conv_ids = {l.layer_id for l in self.layers if l.kind is LayerKind.CONV}
        stray = [lid for lid in self.prunable_layers if lid not in conv_ids]
        if stray:
            raise ConfigError(f"prunable layers must be conv layers: {stray}")
        self.output_shapes()

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise InputError(f"unknown layer id {layer_id!r}")

    def index(self, layer_id: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.layer_id == layer_id:
                return i
        raise InputError(f"unknown layer id {layer_id!r}")

    @property
    def conv_layers(self) -> list[str]:
        return [l.layer_id for l in self.layers if l.kind is LayerKind.CONV]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params.values()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{l.layer_id}.{name}", p) for l in self.layers for name, p in l.params.items()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer, validating the whole chain."""
        shape: tuple[int, ...] = tuple(self.input_shape)
        shapes = []
        for layer in self.layers:
            shape = _layer_output_shape(layer, shape)
            shapes.append(shape)
        if shapes and shapes[-1] != (self.class_count,):
            raise ShapeError(f"model outputs {shapes[-1]}, expected ({self.class_count},)")
        return shapes

    def capture_points(self) -> dict[str, int]:
        """Map each conv layer id to the index of the layer whose output is its activation map.

        That is the activation directly following the conv when there is one,
        otherwise the conv itself.
        """
        points = {}
        for i, layer in enumerate(self.layers):
            if layer.kind is LayerKind.CONV:
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                points[layer.layer_id] = i + 1 if nxt is not None and nxt.kind is LayerKind.RELU else i
        return points

    def describe(self) -> list[dict]:
        return [
            {
                "kind": l.kind.value,
                "id": l.layer_id,
                "hyper": dict(l.hyper),
                "params": {name: list(p.shape) for name, p in l.params.items()},
            }
            for l in self.layers
        ]


def _layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind is LayerKind.CONV:
        if len(shape) != 3:
            raise ShapeError(f"{layer.layer_id}: conv needs a [c, h, w] input, got {shape}")
        c, h, w = shape
        oc, ic, kh, kw = layer.params["weight"].shape
        if ic != c:
            raise ShapeError(f"{layer.layer_id}: expects {ic} input channels, receives {c}")
        s, p = layer.hyper.get("stride", 1), layer.hyper.get("padding", 0)
        span_h, span_w = h + 2 * p - kh, w + 2 * p - kw
        if span_h < 0 or span_w < 0 or span_h % s or span_w % s:
            raise ConfigError(f"{layer.layer_id}: {h}x{w} input gives a non-integral output size")
        return (oc, span_h // s + 1, span_w // s + 1)
    if kind is LayerKind.MAXPOOL:
        k = layer.hyper["k"]
        c, h, w = shape
        if h % k or w % k or h < k:
            raise ConfigError(f"{layer.layer_id}: {h}x{w} maps are not divisible by pool size {k}")
        return (c, h // k, w // k)
    if kind is LayerKind.FLATTEN:
        return (math.prod(shape),)
    if kind is LayerKind.DENSE:
        d_out, d_in = layer.params["weight"].shape
        if shape != (d_in,):
            raise ShapeError(f"{layer.layer_id}: expects input ({d_in},), receives {shape}")
        return (d_out,)
    return shape


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def build_convnet(
    input_shape=(3, 28, 28),
    class_count: int = 10,
    seed: int = 0,
    conv_channels=(32, 48),
    hidden=(100, 100),
    kernel: int = 5,
    pool: int = 2,
    dtype=np.float32,
) -> ModelSpec:
    """Conv(5x5,32)-ReLU-Pool-Conv(5x5,48)-ReLU-Pool-Flatten-FC(100)-ReLU-FC(100)-ReLU-FC(k).

    Weights and biases are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """
    c, h, w = (int(v) for v in input_shape)
    if c not in (1, 3):
        raise ConfigError(f"input must have 1 or 3 channels, got {c}")
    if h < 16 or w < 16:
        raise ConfigError(f"input must be at least 16x16, got {h}x{w}")
    if class_count < 2:
        raise ConfigError(f"need at least two classes, got {class_count}")
    rng = np.random.default_rng(seed)
    layers: list[LayerSpec] = []
    in_c, sh, sw = c, h, w
    for i, out_c in enumerate(conv_channels, start=1):
        sh, sw = sh - kernel + 1, sw - kernel + 1
        if sh < pool or sw < pool or sh % pool or sw % pool:
            raise ConfigError(f"input {h}x{w} is too small or not divisible for conv{i} + pool")
        fan_in = in_c * kernel * kernel
        layers.append(
            LayerSpec(
                LayerKind.CONV,
                f"conv{i}",
                {
                    "weight": _uniform(rng, fan_in, (out_c, in_c, kernel, kernel), dtype),
                    "bias": _uniform(rng, fan_in, (out_c,), dtype),
                },
                {"stride": 1, "padding": 0},
            )
        )
        layers.append(LayerSpec(LayerKind.RELU, f"relu{i}"))
        layers.append(LayerSpec(LayerKind.MAXPOOL, f"pool{i}", hyper={"k": pool}))
        sh, sw = sh // pool, sw // pool
        in_c = out_c
    layers.append(LayerSpec(LayerKind.FLATTEN, "flatten"))
    width = in_c * sh * sw
    dims = list(hidden) + [class_count]
    for j, d_out in enumerate(dims, start=1):
        layers.append(
            LayerSpec(
                LayerKind.DENSE,
                f"fc{j}",
                {"weight": _uniform(rng, width, (d_out, width), dtype), "bias": _uniform(rng, width, (d_out,), dtype)},
            )
        )
        if j < len(dims):
            layers.append(LayerSpec(LayerKind.RELU, f"relu_fc{j}"))
        width = d_out
    conv_ids = [l.layer_id for l in layers if l.kind is LayerKind.CONV]
    return ModelSpec(layers, (c, h, w), class_count, conv_ids, seed)


def forward(
    model: ModelSpec,
    batch,
    capture: Iterable[str] = (),
    keep: Mapping[str, np.ndarray] | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Run the model on ``batch`` ([n, c, h, w]).

    ``capture`` names conv layers whose activation maps are returned.
    ``keep`` maps conv layer ids to boolean channel masks; channels marked
    False are zeroed at the capture point.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"batch shape {x.shape} does not match model input {model.input_shape}")
    points = model.capture_points()
    wanted = set(capture)
    for lid in wanted | set(keep or {}):
        if lid not in points:
            model.layer(lid)  # raises for unknown ids
            raise InputError(f"{lid!r} is not a conv layer; only conv activation maps can be captured")
    at: dict[int, str] = {idx: lid for lid, idx in points.items() if lid in wanted or (keep and lid in keep)}

    captures: dict[str, Tensor] = {}
    for i, layer in enumerate(model.layers):
        x = _apply(layer, x)
        lid = at.get(i)
        if lid is None:
            continue
        if keep is not None and lid in keep:
            x = T.channel_mask(x, keep[lid])
        if lid in wanted:
            captures[lid] = x
    return x, captures


def _apply(layer: LayerSpec, x: Tensor) -> Tensor:
    kind = layer.kind
    if kind is LayerKind.CONV:
        p = layer.params
        return T.conv2d(x, p["weight"], p["bias"], layer.hyper.get("stride", 1), layer.hyper.get("padding", 0))
    if kind is LayerKind.RELU:
        return T.relu(x)
    if kind is LayerKind.MAXPOOL:
        return T.maxpool2d(x, layer.hyper["k"])
    if kind is LayerKind.FLATTEN:
        return T.flatten(x)
    return T.dense(x, layer.params["weight"], layer.params["bias"])


def channel_count(model: ModelSpec, layer_id: str) -> int:
    layer = model.layer(layer_id)
    if layer.kind is not LayerKind.CONV:
        raise InputError(f"{layer_id!r} is a {layer.kind.value} layer, not a conv layer")
    return layer.params["weight"].shape[0]


def clone(model: ModelSpec) -> ModelSpec:
    """Deep copy with fresh parameter buffers and no gradients."""
    layers = [
        LayerSpec(
            l.kind,
            l.layer_id,
            {k: Tensor(p.data.copy(), requires_grad=p.requires_grad) for k, p in l.params.items()},
            dict(l.hyper),
        )
        for l in model.layers
    ]
    return ModelSpec(layers, tuple(model.input_shape), model.class_count, list(model.prunable_layers), model.seed)


def predict(model: ModelSpec, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Arg-max class for every image, evaluated in fixed-size chunks."""
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start : start + batch_size])
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
