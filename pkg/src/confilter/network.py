"""Layered models split into a representation part, a classifier part, and a
swappable output head.

Every scalar parameter gets a stable ParamId ``(layer index, flat offset)``
and a component tag. Layers before ``split_index`` are REPRESENTATION, the
rest of the body is CLASSIFIER, and the final dense layer (the head) is HEAD.
The head is the only layer that gets replaced when the model is retargeted at
confounder labels; the classifier parameters are the masking candidates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor
from .util import canonical_json

__all__ = [
    "Component",
    "Dense",
    "Conv",
    "Pool",
    "Activation",
    "Flatten",
    "ModelSpec",
    "Model",
    "ParamId",
    "build_model",
    "forward",
    "replace_head",
    "set_trainable",
    "check_model_gradients",
    "save_model",
    "load_model",
    "model_to_bytes",
]

ParamId = tuple[int, int]


class Component(str, Enum):
    REPRESENTATION = "representation"
    CLASSIFIER = "classifier"
    HEAD = "head"


ALL_COMPONENTS = frozenset(Component)


# -- layer descriptors ---------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class Pool:
    pool: str  # "max" | "avg"
    size: int
    kind: str = field(default="pool", init=False)


@dataclass(frozen=True)
class Activation:
    fn: str  # "relu" | "tanh" | "sigmoid" | "identity"
    kind: str = field(default="activation", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


LayerSpec = Union[Dense, Conv, Pool, Activation, Flatten]

_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid, "identity": None}


def _layer_to_dict(layer: LayerSpec) -> dict:
    d = {"kind": layer.kind}
    for name in layer.__dataclass_fields__:
        if name != "kind":
            d[name] = getattr(layer, name)
    return d


def _layer_from_dict(d: dict) -> LayerSpec:
    kinds = {"dense": Dense, "conv": Conv, "pool": Pool, "activation": Activation, "flatten": Flatten}
    try:
        cls = kinds[d["kind"]]
    except KeyError as exc:
        raise ConfigError(f"unknown layer kind {d.get('kind')!r}") from exc
    kwargs = {k: v for k, v in d.items() if k != "kind"}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad fields for layer kind {d['kind']!r}: {exc}") from exc


@dataclass(frozen=True)
class ModelSpec:
    """Ordered body layers plus the head descriptor and the init seed.

    ``split_index`` partitions the body: layers[:split_index] form the
    representation, layers[split_index:] the classifier. The head is a dense
    layer producing ``head_classes`` logits whose input width is derived from
    the body's output shape.
    """

    layers: tuple
    split_index: int
    head_classes: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not (0 < self.split_index < len(self.layers)):
            raise ConfigError(
                f"split_index must lie strictly between 0 and {len(self.layers)}, got {self.split_index}"
            )
        if self.head_classes < 2:
            raise ConfigError(f"head needs at least 2 classes, got {self.head_classes}")

    def to_dict(self) -> dict:
        return {
            "layers": [_layer_to_dict(l) for l in self.layers],
            "split_index": self.split_index,
            "head_classes": self.head_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                layers=tuple(_layer_from_dict(l) for l in d["layers"]),
                split_index=int(d["split_index"]),
                head_classes=int(d["head_classes"]),
                seed=int(d.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"model spec missing field {exc}") from exc


def _shape_after(layer: LayerSpec, shape: tuple, index: int) -> tuple:
    """Shape chain for one layer; raises naming the offending layer."""
    where = f"layer {index} ({layer.kind})"
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ConfigError(f"{where}: dense needs a flat input, have shape {shape}")
        if shape[0] != layer.in_features:
            raise ConfigError(f"{where}: expects {layer.in_features} features, have {shape[0]}")
        return (layer.out_features,)
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ConfigError(f"{where}: conv needs a CxHxW input, have shape {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise ConfigError(f"{where}: expects {layer.in_channels} channels, have {c}")
        try:
            ho = T._conv_out_size(h, layer.kernel, layer.stride, layer.padding, "height")
            wo = T._conv_out_size(w, layer.kernel, layer.stride, layer.padding, "width")
        except ShapeError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        return (layer.out_channels, ho, wo)
    if isinstance(layer, Pool):
        if len(shape) != 3:
            raise ConfigError(f"{where}: pool needs a CxHxW input, have shape {shape}")
        c, h, w = shape
        if layer.pool not in ("max", "avg"):
            raise ConfigError(f"{where}: unknown pool kind {layer.pool!r}")
        if h % layer.size or w % layer.size:
            raise ConfigError(f"{where}: size {layer.size} must divide spatial dims {h}x{w}")
        return (c, h // layer.size, w // layer.size)
    if isinstance(layer, Activation):
        if layer.fn not in _ACTIVATIONS:
            raise ConfigError(f"{where}: unknown activation {layer.fn!r}")
        return shape
    if isinstance(layer, Flatten):
        if len(shape) == 1:
            return shape
        n = 1
        for d in shape:
            n *= d
        return (n,)
    raise ConfigError(f"{where}: unsupported layer type")


def head_input_width(spec: ModelSpec, input_shape: tuple) -> int:
    shape = tuple(input_shape)
    for i, layer in enumerate(spec.layers):
        shape = _shape_after(layer, shape, i)
    if len(shape) != 1:
        raise ConfigError(f"head needs a flat input, body produces shape {shape} (add a flatten layer)")
    return shape[0]


# -- realized layers ------------------------------------------------------------


class _Realized:
    """One instantiated layer: its descriptor plus parameter tensors (if any)."""

    def __init__(self, spec: LayerSpec, weight: Tensor | None = None, bias: Tensor | None = None):
        self.spec = spec
        self.weight = weight
        self.bias = bias

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.weight is not None:
            out.append(("W", self.weight))
        if self.bias is not None:
            out.append(("b", self.bias))
        return out


def _init_dense(spec: Dense, rng: np.random.Generator) -> _Realized:
    bound = 1.0 / np.sqrt(spec.in_features)
    w = rng.uniform(-bound, bound, size=(spec.in_features, spec.out_features))
    return _Realized(spec, Tensor(w), Tensor(np.zeros(spec.out_features)))


def _init_conv(spec: Conv, rng: np.random.Generator) -> _Realized:
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
    return _Realized(spec, Tensor(w), Tensor(np.zeros(spec.out_channels)))


class Model:
    """Realized layer stack with a parameter registry and component tags.

    The registry enumerates every scalar parameter exactly once, in a
    deterministic order (body layers in spec order, weights before biases,
    head last). The head always carries index ``len(spec.layers)``.
    """

    def __init__(self, spec: ModelSpec, input_shape: tuple, layers: list[_Realized], head: _Realized):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.layers = layers
        self.head = head

    # -- registry ----------------------------------------------------------

    @property
    def head_index(self) -> int:
        return len(self.layers)

    def tag_of(self, layer_index: int) -> Component:
        if layer_index == self.head_index:
            return Component.HEAD
        if layer_index < self.spec.split_index:
            return Component.REPRESENTATION
        return Component.CLASSIFIER

    def param_entries(self, tags: Iterable[Component] | None = None):
        """Yield (layer_index, name, tensor, tag) in registry order."""
        wanted = ALL_COMPONENTS if tags is None else frozenset(tags)
        for idx, realized in enumerate([*self.layers, self.head]):
            tag = self.tag_of(idx)
            if tag not in wanted:
                continue
            for name, t in realized.params():
                yield idx, name, t, tag

    def parameters(self, tags: Iterable[Component] | None = None) -> list[Tensor]:
        return [t for _, _, t, _ in self.param_entries(tags)]

    def param_ids(self, tags: Iterable[Component] | None = None) -> list[ParamId]:
        """One (layer index, flat offset) per scalar, registry order."""
        ids: list[ParamId] = []
        last_layer = None
        offset = 0
        for idx, _, t, _ in self.param_entries(tags):
            if idx != last_layer:
                last_layer, offset = idx, 0
            ids.extend((idx, offset + i) for i in range(t.size))
            offset += t.size
        return ids

    def flat_values(self, tags: Iterable[Component] | None = None) -> np.ndarray:
        parts = [t.values for _, _, t, _ in self.param_entries(tags)]
        if not parts:
            return np.zeros(0)
        return np.concatenate([p.copy() for p in parts])

    def num_params(self, tags: Iterable[Component] | None = None) -> int:
        return sum(t.size for _, _, t, _ in self.param_entries(tags))

    # -- state -------------------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "Model":
        m = build_model(self.spec, self.input_shape)
        for (_, _, src, _), (_, _, dst, _) in zip(self.param_entries(), m.param_entries()):
            dst.data[...] = src.data
            dst.requires_grad = src.requires_grad
            dst.zero_grad()
        return m


def build_model(spec: ModelSpec, input_shape) -> Model:
    """Realize a ModelSpec: seeded uniform fan-in init for weights, zero biases."""
    input_shape = tuple(int(d) for d in input_shape)
    width = head_input_width(spec, input_shape)  # validates the whole chain
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    realized = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            realized.append(_init_dense(layer, rng))
        elif isinstance(layer, Conv):
            realized.append(_init_conv(layer, rng))
        else:
            realized.append(_Realized(layer))
    head = _init_dense(Dense(width, spec.head_classes), rng)
    model = Model(spec, input_shape, realized, head)
    set_trainable(model, ALL_COMPONENTS)
    return model


def _apply(realized: _Realized, x: Tensor) -> Tensor:
    spec = realized.spec
    if isinstance(spec, Dense):
        return T.add_bias(T.matmul(x, realized.weight), realized.bias)
    if isinstance(spec, Conv):
        return T.add_channel_bias(
            T.conv2d(x, realized.weight, stride=spec.stride, padding=spec.padding), realized.bias
        )
    if isinstance(spec, Pool):
        return T.maxpool2d(x, spec.size) if spec.pool == "max" else T.avgpool2d(x, spec.size)
    if isinstance(spec, Activation):
        fn = _ACTIVATIONS[spec.fn]
        return x if fn is None else fn(x)
    if isinstance(spec, Flatten):
        return T.flatten_batch(x)
    raise ConfigError(f"unsupported layer type {type(spec).__name__}")


def forward(model: Model, batch) -> Tensor:
    """Run the full stack, returning [N, K] logits."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input shape {model.input_shape}")
    for realized in model.layers:
        x = _apply(realized, x)
    return _apply(model.head, x)


def replace_head(model: Model, num_classes: int, seed: int) -> Model:
    """New model with a freshly initialized head; body parameters are copied.

    ParamIds of representation and classifier parameters are unchanged, so
    telemetry recorded on the returned model stays aligned with the original.
    """
    if model.head.weight is None:
        raise ConfigError("model has no dense head layer to replace")
    new_spec = replace(model.spec, head_classes=int(num_classes))
    width = model.head.weight.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    new_head = _init_dense(Dense(width, int(num_classes)), rng)

    body = []
    for realized in model.layers:
        if realized.weight is None:
            body.append(_Realized(realized.spec))
        else:
            body.append(
                _Realized(realized.spec, Tensor(realized.weight.data.copy()), Tensor(realized.bias.data.copy()))
            )
    out = Model(new_spec, model.input_shape, body, new_head)
    set_trainable(out, ALL_COMPONENTS)
    return out


def set_trainable(model: Model, tags: Iterable[Component]) -> None:
    """requires_grad becomes true exactly for parameters whose tag is listed."""
    wanted = frozenset(tags)
    if not wanted:
        raise ConfigError("set_trainable needs at least one component tag")
    for _, _, t, tag in model.param_entries():
        t.requires_grad = tag in wanted
        t.grad = np.zeros_like(t.data) if t.requires_grad else None


def check_model_gradients(model: Model, X, y, h: float = 1e-6, tol: float = 1e-4) -> T.CheckReport:
    """Finite-difference check of every trainable parameter on one batch."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def loss_fn() -> Tensor:
        return T.softmax_cross_entropy(forward(model, X), y)

    return T.finite_difference_check(loss_fn, model.parameters(), h=h, tol=tol)


# -- checkpoints -----------------------------------------------------------------
#
# Layout: magic "CFM1", u32 little-endian header length, canonical-JSON header
# {"spec": ..., "input_shape": ...}, then one tensor record per parameter in
# registry order.

_MAGIC = b"CFM1"


def model_to_bytes(model: Model) -> bytes:
    header = canonical_json({"spec": model.spec.to_dict(), "input_shape": list(model.input_shape)}).encode()
    chunks = [_MAGIC, struct.pack("<I", len(header)), header]
    for _, _, t, _ in model.param_entries():
        chunks.append(T.tensor_to_bytes(t))
    return b"".join(chunks)


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise FormatError(f"not a model checkpoint (bad magic {buf[:4]!r})")
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if 8 + hlen > len(buf):
        raise FormatError("truncated checkpoint header")
    import json

    try:
        header = json.loads(buf[8 : 8 + hlen].decode())
        spec = ModelSpec.from_dict(header["spec"])
        input_shape = tuple(int(d) for d in header["input_shape"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc

    model = build_model(spec, input_shape)
    offset = 8 + hlen
    for _, _, t, _ in model.param_entries():
        arr, offset = T.tensor_from_bytes(buf, offset)
        if arr.shape != t.shape:
            raise FormatError(f"checkpoint tensor shape {arr.shape} does not match spec shape {t.shape}")
        t.data[...] = arr
    if offset != len(buf):
        raise FormatError(f"checkpoint has {len(buf) - offset} trailing bytes")
    return model
