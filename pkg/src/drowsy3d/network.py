"""Architecture tables, block builders and model assembly.

A model is a flat sequence of *stages*, one per architecture row. Each
stage owns one or more layers; a row with ``n`` repeats becomes ``n``
bottleneck blocks. Layers cache what their backward pass needs during a
training-mode forward and expose parameters, running buffers and
gradients under dotted names (``block3.expand.w`` and so on).
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import BatchNormParams, ConfigError, ConvParams, GraphError, ShapeError

VARIANTS = ("ours_early", "mobilenet2d", "late_fusion", "slow_fusion")
OPERATORS = (
    "conv3d",
    "conv2d",
    "bottleneck3d",
    "bottleneck2d",
    "conv2d_1x1",
    "avgpool",
    "classifier",
)


@dataclass(frozen=True)
class LayerSpec:
    """One architecture row: operator, expansion ``t``, base channels ``c``,
    repeats ``n`` and the stride used by the first repeat."""

    operator: str
    t: int | None
    c: int | None
    n: int
    s: int | tuple[int, ...] | None

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown operator {self.operator!r}")
        if self.n < 1:
            raise ConfigError("repeat count must be >= 1")
        if self.operator != "avgpool" and not (self.c and self.c > 0):
            raise ConfigError(f"{self.operator} needs positive channels")
        is_bottleneck = self.operator.startswith("bottleneck")
        if is_bottleneck != (self.t is not None):
            raise ConfigError("expansion factor is required exactly for bottlenecks")


# Base (multiplier 1.0) channels; widths in the published 1.4 table come
# out of scale_channels.
MOBILENET_TAIL = (
    LayerSpec("bottleneck2d", 6, 24, 2, 2),
    LayerSpec("bottleneck2d", 6, 32, 3, 2),
    LayerSpec("bottleneck2d", 6, 64, 4, 2),
    LayerSpec("bottleneck2d", 6, 96, 3, 1),
    LayerSpec("bottleneck2d", 6, 160, 3, 2),
    LayerSpec("bottleneck2d", 6, 320, 1, 1),
    LayerSpec("conv2d_1x1", None, 1280, 1, 1),
    LayerSpec("avgpool", None, None, 1, None),
    LayerSpec("classifier", None, 2, 1, 1),
)

MOBILENET_V2_ROWS = (
    LayerSpec("conv2d", None, 32, 1, 2),
    LayerSpec("bottleneck2d", 1, 16, 1, 1),
) + MOBILENET_TAIL

EARLY_FUSION_ROWS = (
    LayerSpec("conv3d", None, 32, 1, (2, 2, 2)),
    LayerSpec("bottleneck3d", 1, 16, 1, (1, 1, 5)),
) + MOBILENET_TAIL


def scale_channels(base_c: int, multiplier: float, divisor: int = 8) -> int:
    """Scale a channel count and round to the nearest multiple of ``divisor``.

    Never returns less than ``divisor`` or less than 90% of the exact
    product.
    """
    v = base_c * multiplier
    out = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if out < 0.9 * v:
        out += divisor
    return out


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "ours_early"
    depth_multiplier: float = 1.4
    frames: int = 10
    spatial: int = 224
    classes: int = 2
    channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.spatial < 32 or self.spatial % 32:
            raise ConfigError(f"spatial size {self.spatial} is not divisible by 32")
        if not self.depth_multiplier > 0:
            raise ConfigError("depth multiplier must be positive")
        if self.classes != 2:
            raise ConfigError("only two-class models are supported")

    @property
    def input_shape(self) -> tuple[int, ...]:
        """Unbatched model input shape ``(h, w, f, k)``."""
        return (self.spatial, self.spatial, self.frames, self.channels)


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------


class Layer:
    """Base class; subclasses fill ``params``/``buffers`` and ``children``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: list[tuple[str, Layer]] = []

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children:
            yield from child.named_params(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children:
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.grads.items():
            yield prefix + k, v
        for name, child in self.children:
            yield from child.named_grads(f"{prefix}{name}.")

    def clear_state(self):
        """Drop gradients and cached activations."""
        self.grads = {}
        self._cache = None
        for _, child in self.children:
            child.clear_state()

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Output shape for an unbatched input shape."""
        raise NotImplementedError

    def macs(self, shape: tuple[int, ...]) -> int:
        return 0

    def _cached(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise GraphError(
                f"{type(self).__name__}.backward called without a training forward"
            )
        return cache


class ConvUnit(Layer):
    """Convolution, optional batch norm, optional ReLU6.

    ``kind`` is ``full``, ``depthwise`` or ``pointwise``. Pointwise weights
    are stored as an ``(in, out)`` matrix.
    """

    def __init__(self, kind, cin, cout, kernel=(1,), stride=(1,), *, bn=True,
                 act=True, bias=False, rng=None, dtype=np.float32):
        super().__init__()
        self.kind = kind
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.cin, self.cout = cin, cout
        self.bn, self.act, self.has_bias = bn, act, bias
        self.bn_epsilon, self.bn_momentum = 1e-3, 0.99
        rng = rng if rng is not None else np.random.default_rng(0)
        k = int(np.prod(self.kernel))
        if kind == "pointwise":
            self.params["w"] = T.he_normal(rng, (cin, cout), cin, dtype)
        elif kind == "depthwise":
            if cin != cout:
                raise ShapeError("depthwise convolution preserves channels")
            self.params["w"] = T.he_normal(rng, self.kernel + (cin,), k, dtype)
        elif kind == "full":
            self.params["w"] = T.he_normal(rng, self.kernel + (cin, cout), k * cin, dtype)
        else:
            raise ConfigError(f"unknown convolution kind {kind!r}")
        if bias:
            self.params["b"] = np.zeros(cout, dtype)
        if bn:
            self.params["gamma"] = np.ones(cout, dtype)
            self.params["beta"] = np.zeros(cout, dtype)
            self.buffers["mean"] = np.zeros(cout, dtype)
            self.buffers["var"] = np.ones(cout, dtype)
        self._cache = None

    @property
    def conv_params(self) -> ConvParams:
        return ConvParams(self.params["w"], self.stride, depthwise=self.kind == "depthwise",
                          bias=self.params.get("b"))

    def _bn_params(self, training):
        return BatchNormParams(self.params["gamma"], self.params["beta"],
                               self.buffers["mean"], self.buffers["var"],
                               self.bn_epsilon, self.bn_momentum, training)

    def forward(self, x, training=False):
        if self.kind == "pointwise":
            z = T.pointwise_conv(x, self.params["w"])
            if self.has_bias:
                z = z + self.params["b"]
        else:
            z = T.conv3d(x, self.conv_params)
        bn_cache = None
        if self.bn:
            y, mean, var, bn_cache = T.batch_norm(z, self._bn_params(training))
            if training:
                self.buffers["mean"], self.buffers["var"] = mean, var
        else:
            y = z
        a = T.relu6(y) if self.act else y
        self._cache = (x, y, bn_cache) if training else None
        return a

    def backward(self, dy):
        x, y, bn_cache = self._cached()
        if self.act:
            dy = T.relu6_backward(dy, y)
        if self.bn:
            dy, self.grads["gamma"], self.grads["beta"] = T.batch_norm_backward(dy, bn_cache)
        if self.kind == "pointwise":
            dx, self.grads["w"] = T.pointwise_conv_backward(dy, x, self.params["w"])
            if self.has_bias:
                self.grads["b"] = dy.reshape(-1, self.cout).sum(axis=0)
        else:
            dx, self.grads["w"], db = T.conv3d_backward(dy, x, self.conv_params)
            if self.has_bias:
                self.grads["b"] = db
        self._cache = None
        return dx

    def out_shape(self, shape):
        nk = len(shape) - 1
        kernel = self.kernel if self.kind != "pointwise" else (1,) * nk
        stride = self.stride if self.kind != "pointwise" else (1,) * nk
        if len(kernel) != nk or shape[-1] != self.cin:
            raise ShapeError(f"{self.kind} conv {self.kernel}/{self.cin} cannot take {shape}")
        return tuple(-(-n // s) for n, s in zip(shape[:-1], stride)) + (self.cout,)

    def macs(self, shape):
        out = self.out_shape(shape)
        positions = int(np.prod(out[:-1]))
        if self.kind == "pointwise":
            return positions * self.cin * self.cout
        k = int(np.prod(self.kernel))
        if self.kind == "depthwise":
            return positions * k * self.cout
        return positions * k * self.cin * self.cout

    def fold(self) -> "ConvUnit":
        """Return an equivalent unit with batch norm merged into the weights."""
        if not self.bn:
            return copy.deepcopy(self)
        out = copy.deepcopy(self)
        scale = self.params["gamma"].astype(np.float64) / np.sqrt(
            self.buffers["var"].astype(np.float64) + self.bn_epsilon
        )
        b0 = self.params.get("b", np.zeros(self.cout)).astype(np.float64)
        dtype = self.params["w"].dtype
        w = self.params["w"].astype(np.float64) * scale
        b = (b0 - self.buffers["mean"].astype(np.float64)) * scale + self.params["beta"]
        out.params = {"w": w.astype(dtype), "b": b.astype(dtype)}
        out.buffers = {}
        out.bn, out.has_bias = False, True
        out.clear_state()
        return out


class Bottleneck(Layer):
    """Inverted residual block in 2D or 3D.

    Expand 1x1 (skipped when ``t == 1``), depthwise ``kernel`` with
    ``stride``, linear 1x1 projection; identity skip iff every stride is 1
    and input and output widths match.
    """

    def __init__(self, cin, t, cout, stride, kernel, rng=None, dtype=np.float32):
        super().__init__()
        self.cin, self.t, self.cout = cin, t, cout
        self.stride, self.kernel = tuple(stride), tuple(kernel)
        hidden = cin * t
        if t != 1:
            self.children.append(("expand", ConvUnit("pointwise", cin, hidden, rng=rng, dtype=dtype)))
        self.children.append(("dw", ConvUnit("depthwise", hidden, hidden, kernel, stride, rng=rng, dtype=dtype)))
        self.children.append(("project", ConvUnit("pointwise", hidden, cout, act=False, rng=rng, dtype=dtype)))
        self.has_skip = all(s == 1 for s in self.stride) and cin == cout

    def forward(self, x, training=False):
        y = x
        for _, unit in self.children:
            y = unit.forward(y, training)
        return T.residual_add(x, y) if self.has_skip else y

    def backward(self, dy):
        d = dy
        for _, unit in reversed(self.children):
            d = unit.backward(d)
        return d + dy if self.has_skip else d

    def out_shape(self, shape):
        for _, unit in self.children:
            shape = unit.out_shape(shape)
        return shape

    def macs(self, shape):
        total = 0
        for _, unit in self.children:
            total += unit.macs(shape)
            shape = unit.out_shape(shape)
        return total

    def fold(self):
        out = copy.copy(self)
        out.params, out.buffers, out.grads = {}, {}, {}
        out.children = [(n, u.fold()) for n, u in self.children]
        return out


class SqueezeFrames(Layer):
    """Drop a length-1 temporal axis: ``(B, h, w, 1, c) -> (B, h, w, c)``."""

    def forward(self, x, training=False):
        if x.shape[3] != 1:
            raise ShapeError(f"cannot squeeze temporal axis of {x.shape}")
        return x[:, :, :, 0, :]

    def backward(self, dy):
        return dy[:, :, :, None, :]

    def out_shape(self, shape):
        if len(shape) != 4 or shape[2] != 1:
            raise ShapeError(f"cannot squeeze temporal axis of {shape}")
        return shape[:2] + shape[3:]


class LastFrame(Layer):
    """Feed a frame-based column: keep only the newest frame of a clip."""

    def forward(self, x, training=False):
        self._cache = x.shape if training else None
        return x[:, :, :, -1, :]

    def backward(self, dy):
        shape = self._cached()
        dx = np.zeros(shape, dy.dtype)
        dx[:, :, :, -1, :] = dy
        return dx

    def out_shape(self, shape):
        return shape[:2] + shape[3:]


class GlobalAvgPool(Layer):
    """Average over every spatial axis, keeping a ``1 x 1`` map."""

    def forward(self, x, training=False):
        self._cache = x.shape if training else None
        y = T.global_avg_pool(x)
        return y[:, None, None, :]

    def backward(self, dy):
        return T.global_avg_pool_backward(dy[:, 0, 0, :], self._cached())

    def out_shape(self, shape):
        return (1, 1, shape[-1])


class LateFusion(Layer):
    """Run a shared 2D column on every frame and average the pooled features."""

    def __init__(self, column: "Sequential"):
        super().__init__()
        self.children.append(("column", column))

    @property
    def column(self):
        return self.children[0][1]

    def forward(self, x, training=False):
        b, h, w, f, c = x.shape
        frames = x.transpose(0, 3, 1, 2, 4).reshape(b * f, h, w, c)
        feats = self.column.forward(frames, training)  # (b*f, 1, 1, d)
        self._cache = (b, f) if training else None
        return feats.reshape(b, f, 1, 1, -1).mean(axis=1)

    def backward(self, dy):
        b, f = self._cached()
        d = np.repeat(dy[:, None] / f, f, axis=1).reshape((b * f,) + dy.shape[1:])
        dframes = self.column.backward(d)
        _, h, w, c = dframes.shape
        return dframes.reshape(b, f, h, w, c).transpose(0, 2, 3, 1, 4)

    def out_shape(self, shape):
        return self.column.out_shape(shape[:2] + shape[3:])

    def macs(self, shape):
        return shape[2] * self.column.macs(shape[:2] + shape[3:])

    def fold(self):
        out = copy.copy(self)
        out.params, out.buffers, out.grads = {}, {}, {}
        out.children = [("column", self.column.fold())]
        return out


class Sequential(Layer):
    def __init__(self, layers: Sequence[tuple[str, Layer]] = ()):
        super().__init__()
        self.children = list(layers)

    def forward(self, x, training=False):
        for _, layer in self.children:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.children):
            dy = layer.backward(dy)
        return dy

    def out_shape(self, shape):
        for _, layer in self.children:
            shape = layer.out_shape(shape)
        return shape

    def macs(self, shape):
        total = 0
        for _, layer in self.children:
            total += layer.macs(shape)
            shape = layer.out_shape(shape)
        return total

    def fold(self):
        return Sequential([(n, _fold(layer)) for n, layer in self.children])


def _fold(layer):
    return layer.fold() if hasattr(layer, "fold") else copy.deepcopy(layer)


# ----------------------------------------------------------------------
# Builders
# ----------------------------------------------------------------------


def build_bottleneck2d(in_ch, t, c, s, multiplier=1.0, rng=None, dtype=np.float32):
    """2D inverted residual block; ``c`` is the base width before scaling."""
    return Bottleneck(in_ch, t, scale_channels(c, multiplier), (s, s), (3, 3), rng, dtype)


def build_bottleneck3d(in_shape, t, c, stride=(1, 1, 5), kernel=(3, 3, 5), rng=None,
                       dtype=np.float32):
    """3D inverted residual block for an ``(h, w, f, k)`` input and ``c`` output channels."""
    if len(in_shape) != 4:
        raise ShapeError(f"expected an h x w x f x k input shape, got {in_shape}")
    return Bottleneck(in_shape[-1], t, c, tuple(stride), tuple(kernel), rng, dtype)


@dataclass
class Stage:
    spec: LayerSpec
    names: list[str]


class Model(Sequential):
    """An instantiated network: ordered named layers plus their config.

    ``forward`` takes ``(B, h, w, f, k)`` clips and returns ``(B, 2)``
    logits.
    """

    def __init__(self, config: NetworkConfig, layers, stages: list[Stage], prefix_layers=()):
        super().__init__(list(prefix_layers) + list(layers))
        self.config = config
        self.stages = stages
        self.n_prefix = len(prefix_layers)
        self.frozen = False

    def forward(self, x, training=False):
        if training and self.frozen:
            raise GraphError("stripped models run in inference mode only")
        if x.ndim != 5 or x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"model expects (B, {self.config.input_shape}), got {x.shape}")
        out = super().forward(x, training)
        return out.reshape(x.shape[0], -1)

    def backward(self, dlogits):
        if self.frozen:
            raise GraphError("stripped models have no gradient bookkeeping")
        return super().backward(dlogits[:, None, None, :])

    def predict_proba(self, x) -> np.ndarray:
        """Probability of the drowsy class for each clip in the batch."""
        return T.softmax(self.forward(x).astype(np.float64))[:, 1]

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def buffers_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics, in a stable order."""
        out = self.parameters()
        out.update(self.buffers_dict())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for holder, attr, name in self._slots():
            holder_dict = getattr(holder, attr)
            holder_dict[name.rsplit(".", 1)[-1]] = np.array(
                state[name], dtype=holder_dict[name.rsplit(".", 1)[-1]].dtype
            )

    def _slots(self):
        def walk(layer, prefix):
            for k in layer.params:
                yield layer, "params", prefix + k
            for k in layer.buffers:
                yield layer, "buffers", prefix + k
            for n, child in layer.children:
                yield from walk(child, f"{prefix}{n}.")
        yield from walk(self, "")

    def state_tensor_count(self) -> int:
        """Tensors held by the model, including training-only gradients."""
        return len(self.state_dict()) + len(self.gradients())

    def stage_trace(self) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
        """``(operator, input shape, output shape)`` per architecture row."""
        shape = self.config.input_shape
        for _, layer in self.children[: self.n_prefix]:
            shape = layer.out_shape(shape)
        if self.config.variant == "late_fusion":
            return self._late_trace(shape)
        layers = dict(self.children)
        rows = []
        for stage in self.stages:
            start = shape
            for name in stage.names:
                shape = layers[name].out_shape(shape)
            rows.append((stage.spec.operator, start, shape))
        return rows

    def _late_trace(self, shape):
        fusion, head = self.children[self.n_prefix][1], dict(self.children)
        column = dict(fusion.column.children)
        frame_shape = shape[:2] + shape[3:]
        rows = []
        for stage in self.stages:
            start = frame_shape
            for name in stage.names:
                layer = column.get(name) or head[name]
                frame_shape = layer.out_shape(frame_shape)
            rows.append((stage.spec.operator, start, frame_shape))
        return rows

    def astype(self, dtype) -> "Model":
        out = copy.deepcopy(self)
        out.clear_state()

        def cast(layer):
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
            layer.buffers = {k: v.astype(dtype) for k, v in layer.buffers.items()}
            for _, child in layer.children:
                cast(child)

        cast(out)
        return out


def _stage_layers(spec: LayerSpec, idx: int, shape, multiplier, rng, dtype, kind: str,
                  frames: int):
    """Instantiate the layers of one architecture row.

    ``kind`` selects the 2D/3D flavour of bottlenecks: ``early`` squeezes
    the temporal axis after the 3D bottleneck, ``slow`` keeps it.
    """
    op = spec.operator
    if op in ("conv3d", "conv2d"):
        c = scale_channels(spec.c, multiplier)
        if op == "conv3d":
            kernel, stride = (3, 3, 3), tuple(spec.s)
        else:
            kernel, stride = (3, 3), (spec.s, spec.s)
        return [("stem", ConvUnit("full", shape[-1], c, kernel, stride, rng=rng, dtype=dtype))]
    if op in ("bottleneck3d", "bottleneck2d"):
        layers = []
        c = scale_channels(spec.c, multiplier)
        for r in range(spec.n):
            s = spec.s if r == 0 else 1
            name = f"block{idx + r}"
            if op == "bottleneck2d":
                s = s if isinstance(s, int) else s[0]
                block = Bottleneck(shape[-1], spec.t, c, (s, s), (3, 3), rng, dtype)
            elif kind == "slow":
                s = s if isinstance(s, int) else s[0]
                block = build_bottleneck3d(shape, spec.t, c, (s, s, 1), (3, 3, 3), rng, dtype)
            else:
                # temporal kernel and stride consume every remaining frame
                f = shape[2]
                block = build_bottleneck3d(shape, spec.t, c, (spec.s[0], spec.s[1], f),
                                           (3, 3, f), rng, dtype)
            layers.append((name, block))
            shape = block.out_shape(shape)
        if op == "bottleneck3d" and kind == "early":
            layers.append((f"squeeze{idx}", SqueezeFrames()))
        return layers
    if op == "conv2d_1x1":
        c = scale_channels(spec.c, multiplier)
        return [("head", ConvUnit("pointwise", shape[-1], c, rng=rng, dtype=dtype))]
    if op == "avgpool":
        return [("pool", GlobalAvgPool())]
    if op == "classifier":
        return [("classifier", ConvUnit("pointwise", shape[-1], spec.c, bn=False, act=False,
                                        bias=True, rng=rng, dtype=dtype))]
    raise ConfigError(op)


def _assemble(rows, shape, multiplier, rng, dtype, kind, frames):
    layers, stages = [], []
    idx = 0
    for spec in rows:
        new = _stage_layers(spec, idx, shape, multiplier, rng, dtype, kind, frames)
        for _, layer in new:
            shape = layer.out_shape(shape)
        if spec.operator.startswith("bottleneck"):
            idx += spec.n
        layers.extend(new)
        stages.append(Stage(spec, [n for n, _ in new]))
    return layers, stages, shape


def slow_fusion_rows() -> tuple[LayerSpec, ...]:
    rows = [LayerSpec("conv3d", None, 32, 1, (2, 2, 1))]
    for spec in MOBILENET_V2_ROWS[1:]:
        if spec.operator == "bottleneck2d":
            spec = replace(spec, operator="bottleneck3d")
        rows.append(spec)
    return tuple(rows)


def build_model(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    m = config.depth_multiplier
    shape = config.input_shape
    if config.variant == "ours_early":
        layers, stages, _ = _assemble(EARLY_FUSION_ROWS, shape, m, rng, dtype, "early",
                                      config.frames)
        return Model(config, layers, stages)
    if config.variant == "slow_fusion":
        layers, stages, _ = _assemble(slow_fusion_rows(), shape, m, rng, dtype, "slow",
                                      config.frames)
        return Model(config, layers, stages)
    frame_shape = shape[:2] + shape[3:]
    if config.variant == "mobilenet2d":
        layers, stages, _ = _assemble(MOBILENET_V2_ROWS, frame_shape, m, rng, dtype, "2d", 1)
        return Model(config, layers, stages, prefix_layers=[("frame", LastFrame())])
    # late fusion: shared column up to the pool, then the classifier
    col_layers, stages, feat = _assemble(MOBILENET_V2_ROWS[:-1], frame_shape, m, rng, dtype,
                                         "2d", 1)
    head, head_stage, _ = _assemble(MOBILENET_V2_ROWS[-1:], feat, m, rng, dtype, "2d", 1)
    fusion = LateFusion(Sequential(col_layers))
    model = Model(config, [("fuse", fusion)] + head, stages + head_stage)
    return model


# ----------------------------------------------------------------------
# Cost model
# ----------------------------------------------------------------------


def count_params(model: Layer) -> int:
    return int(sum(v.size for _, v in model.named_params()))


def count_flops(model: Layer) -> int:
    """Multiply-accumulates of one forward pass on a single clip."""
    if not getattr(model, "children", None):
        return 0
    shape = model.config.input_shape if isinstance(model, Model) else None
    if shape is None:
        raise ValueError("count_flops needs a built model")
    return int(model.macs(shape))


# ----------------------------------------------------------------------
# Stripping
# ----------------------------------------------------------------------


def strip_for_inference(model: Model, fold_bn: bool = False) -> Model:
    """Copy of ``model`` with training state removed and weights frozen.

    With ``fold_bn`` every batch norm is merged into the preceding
    convolution, which then carries a bias.
    """
    if fold_bn:
        layers = [(n, _fold(layer)) for n, layer in model.children]
        out = Model(model.config, layers[model.n_prefix:], copy.deepcopy(model.stages),
                    prefix_layers=layers[: model.n_prefix])
    else:
        out = copy.deepcopy(model)
    out.clear_state()
    out.frozen = True
    out.bn_folded = fold_bn
    return out


# ----------------------------------------------------------------------
# Weight files
# ----------------------------------------------------------------------

WEIGHT_MAGIC = b"DSW1"
WEIGHT_VERSION = 1


class WeightFileError(ValueError):
    """Base class for weight file problems."""


class WeightMagicError(WeightFileError):
    pass


class WeightVersionError(WeightFileError):
    pass


class WeightTruncatedError(WeightFileError):
    pass


class ManifestMismatchError(WeightFileError):
    pass


def save_weights(model: Model, path) -> None:
    if getattr(model, "bn_folded", False):
        raise ValueError("batch-norm folded models cannot be saved; save before folding")
    cfg = model.config
    state = model.state_dict()
    parts = [
        WEIGHT_MAGIC,
        struct.pack("<I", WEIGHT_VERSION),
        struct.pack("<BdIII", VARIANTS.index(cfg.variant), cfg.depth_multiplier,
                    cfg.frames, cfg.spatial, cfg.classes),
        struct.pack("<I", len(state)),
    ]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightTruncatedError(
                f"file ends inside {what} (need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_weight_file(path) -> tuple[NetworkConfig, dict[str, np.ndarray]]:
    """Parse a weight file into its config and named tensors."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != WEIGHT_MAGIC:
        raise WeightMagicError(f"{path}: not a weight file")
    (version,) = r.unpack("<I", "version")
    if version != WEIGHT_VERSION:
        raise WeightVersionError(f"{path}: unsupported version {version}")
    vid, mult, frames, spatial, classes = r.unpack("<BdIII", "metadata")
    if vid >= len(VARIANTS):
        raise WeightFileError(f"{path}: unknown variant id {vid}")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = r.take(n, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"{path}: tensor {i} name is not UTF-8") from exc
        (rank,) = r.unpack("<B", f"tensor {name} rank")
        shape = r.unpack(f"<{rank}I", f"tensor {name} extents")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"tensor {name} data"), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise WeightFileError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    channels = next(
        (v.shape[-2] for k, v in tensors.items() if k.endswith("stem.w")), 1
    )
    config = NetworkConfig(VARIANTS[vid], mult, frames, spatial, classes, channels)
    return config, tensors


def load_weights(path, model: Model | None = None) -> Model:
    """Load a weight file into a freshly built model, or into ``model``.

    Nothing is modified unless the whole file parses and its manifest
    matches the target model.
    """
    config, tensors = read_weight_file(path)
    if model is not None and model.config != config:
        raise ManifestMismatchError(f"file holds {config}, model is {model.config}")
    target = model if model is not None else build_model(config)
    expected = {k: v.shape for k, v in target.state_dict().items()}
    found = {k: v.shape for k, v in tensors.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))[:3]
        extra = sorted(set(found) - set(expected))[:3]
        raise ManifestMismatchError(
            f"tensor manifest differs (missing {missing}, unexpected {extra})"
        )
    target.load_state_dict(tensors)
    return target


__all__ = [
    "Bottleneck",
    "ConvUnit",
    "EARLY_FUSION_ROWS",
    "LayerSpec",
    "MOBILENET_V2_ROWS",
    "ManifestMismatchError",
    "Model",
    "NetworkConfig",
    "VARIANTS",
    "WeightFileError",
    "WeightMagicError",
    "WeightTruncatedError",
    "WeightVersionError",
    "build_bottleneck2d",
    "build_bottleneck3d",
    "build_model",
    "count_flops",
    "count_params",
    "load_weights",
    "save_weights",
    "scale_channels",
    "strip_for_inference",
]
