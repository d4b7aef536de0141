"""Declarative network descriptions and a small graph executor.

A :class:`ModelSpec` is plain data. Parameter shapes, forward/backward passes
and the complexity counts in :mod:`nldenoise.nn.complexity` are all derived
from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import functional as F

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

INPUT = "input"
LAYER_KINDS = ("conv", "dwsep", "deconv", "concat")


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    inputs: tuple
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    relu: bool = False
    bn: bool = False
    bias: bool = True

    def param_shapes(self) -> dict:
        n = self.name
        if self.kind == "conv":
            shapes = {f"{n}.weight": (self.out_ch, self.in_ch, self.kernel, self.kernel)}
        elif self.kind == "dwsep":
            shapes = {
                f"{n}.depthwise": (self.in_ch, 1, self.kernel, self.kernel),
                f"{n}.pointwise": (self.out_ch, self.in_ch, 1, 1),
            }
        elif self.kind == "deconv":
            shapes = {f"{n}.weight": (self.in_ch, self.out_ch, 2, 2)}
        else:
            return {}
        if self.bias:
            shapes[f"{n}.bias"] = (self.out_ch,)
        if self.bn:
            for s in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{n}.bn.{s}"] = (self.out_ch,)
        return shapes

    def output_hw(self, hw):
        h, w = hw
        if self.kind == "deconv":
            return 2 * h, 2 * w
        if self.kind in ("conv", "dwsep"):
            p = self.kernel // 2
            return (h + 2 * p - self.kernel) // self.stride + 1, (w + 2 * p - self.kernel) // self.stride + 1
        return h, w

    def cost(self, out_hw) -> tuple[int, int]:
        """(multiply-accumulates, bias additions) for one image."""
        px = out_hw[0] * out_hw[1]
        k2 = self.kernel * self.kernel
        if self.kind == "conv":
            macs = self.in_ch * self.out_ch * k2 * px
        elif self.kind == "dwsep":
            macs = self.in_ch * k2 * px + self.in_ch * self.out_ch * px
        elif self.kind == "deconv":
            macs = self.in_ch * self.out_ch * px
        else:
            return 0, 0
        return macs, (self.out_ch * px if self.bias else 0)


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    layers: tuple
    in_channels: int
    out_channels: int
    divisor: int = 1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        channels = {INPUT: self.in_channels}
        scale = {INPUT: 1}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if layer.name in channels:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            for src in layer.inputs:
                if src not in channels:
                    raise ValueError(f"{layer.name}: input {src!r} is not an earlier node")
            if layer.kind == "concat":
                got = sum(channels[s] for s in layer.inputs)
                scales = {scale[s] for s in layer.inputs}
                if len(scales) != 1:
                    raise ValueError(f"{layer.name}: skip endpoints differ in spatial scale")
                scale[layer.name] = scales.pop()
            else:
                if len(layer.inputs) != 1:
                    raise ValueError(f"{layer.name}: expected exactly one input")
                got = channels[layer.inputs[0]]
                s = scale[layer.inputs[0]]
                scale[layer.name] = s * 2 if layer.kind == "deconv" else s / layer.stride
            if got != layer.in_ch:
                raise ValueError(f"{layer.name}: expects {layer.in_ch} channels, receives {got}")
            channels[layer.name] = layer.out_ch
        if not self.layers:
            if self.in_channels != self.out_channels:
                raise ValueError("empty model must map channels identically")
        elif self.layers[-1].out_ch != self.out_channels:
            raise ValueError("last layer does not produce out_channels")

    @property
    def output(self) -> str:
        return self.layers[-1].name if self.layers else INPUT

    def param_shapes(self) -> dict:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def trainable_names(self) -> list:
        return [n for n in self.param_shapes() if ".running_" not in n]

    def infer_shapes(self, input_dims) -> dict:
        """Output (N, C, H, W) of every node for an input of ``input_dims``."""
        n, c, h, w = input_dims
        if c != self.in_channels:
            raise ValueError(f"model expects {self.in_channels} input channels, got {c}")
        if h % self.divisor or w % self.divisor:
            raise ValueError(f"input {h}x{w} is not divisible by {self.divisor}")
        dims = {INPUT: (n, c, h, w)}
        for layer in self.layers:
            src = dims[layer.inputs[0]]
            oh, ow = layer.output_hw(src[2:])
            dims[layer.name] = (n, layer.out_ch, oh, ow)
        return dims

    def receptive_radius(self) -> int:
        """Conservative bound on how far (in input pixels) an output pixel looks."""
        rad = {INPUT: 0.0}
        scale = {INPUT: 1.0}
        for layer in self.layers:
            if layer.kind == "concat":
                rad[layer.name] = max(rad[s] for s in layer.inputs)
                scale[layer.name] = scale[layer.inputs[0]]
                continue
            src = layer.inputs[0]
            s = scale[src]
            if layer.kind == "deconv":
                rad[layer.name] = rad[src] + s
                scale[layer.name] = s / 2
            else:
                rad[layer.name] = rad[src] + (layer.kernel // 2) * s
                scale[layer.name] = s * layer.stride
        return int(math.ceil(rad[self.output]))

    # -- serialization ----------------------------------------------------

    def to_toml(self) -> str:
        lines = [
            f"arch = {_toml_value(self.arch)}",
            f"in_channels = {self.in_channels}",
            f"out_channels = {self.out_channels}",
            f"divisor = {self.divisor}",
            "",
            "[meta]",
        ]
        for k, v in self.meta.items():
            lines.append(f"{k} = {_toml_value(v)}")
        for layer in self.layers:
            lines += ["", "[[layers]]"]
            for k, v in asdict(layer).items():
                lines.append(f"{k} = {_toml_value(list(v) if isinstance(v, tuple) else v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_toml(cls, text: str) -> "ModelSpec":
        d = tomllib.loads(text)
        layers = [Layer(**{**ld, "inputs": tuple(ld["inputs"])}) for ld in d.get("layers", [])]
        meta = d.get("meta", {})
        return cls(d["arch"], tuple(layers), d["in_channels"], d["out_channels"],
                   d.get("divisor", 1), meta)

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    @classmethod
    def load(cls, path) -> "ModelSpec":
        return cls.from_toml(Path(path).read_text())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


# ----------------------------------------------------------------------------
# architectures


@dataclass(frozen=True)
class FixedNetConfig:
    K: int = 10
    width: int = 64
    in_channels: int = 6
    out_channels: int = 3

    def __post_init__(self):
        if self.K < 3:
            raise ValueError("K must be >= 3")


@dataclass(frozen=True)
class FlexNetConfig:
    widths: tuple = (32, 96, 224, 416)
    in_channels: int = 7
    out_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) != 4:
            raise ValueError("exactly 4 encoder widths are required")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be non-decreasing with depth")


def build_fixed(cfg: FixedNetConfig = FixedNetConfig()) -> ModelSpec:
    """Plain residual CNN: conv+ReLU, (K-2) x conv+BN+ReLU, conv."""
    w = cfg.width
    layers = [Layer("conv1", "conv", (INPUT,), cfg.in_channels, w, relu=True)]
    for i in range(2, cfg.K):
        layers.append(Layer(f"conv{i}", "conv", (f"conv{i - 1}",), w, w, relu=True, bn=True))
    layers.append(Layer(f"conv{cfg.K}", "conv", (f"conv{cfg.K - 1}",), w, cfg.out_channels))
    meta = {"K": cfg.K, "width": w}
    return ModelSpec("fixed", tuple(layers), cfg.in_channels, cfg.out_channels, 1, meta)


def build_flexible(cfg: FlexNetConfig = FlexNetConfig()) -> ModelSpec:
    """Four-scale U-Net of depthwise separable blocks.

    Each encoder downsamples with a stride-2 separable conv and refines with a
    stride-1 one; each decoder upsamples with a 2x2 transposed conv, concatenates
    the matching encoder activation and fuses with a separable conv.
    """
    w = cfg.widths
    layers = [Layer("stem", "conv", (INPUT,), cfg.in_channels, w[0], relu=True)]
    skips = ["stem"]
    prev, ch = "stem", w[0]
    for i in range(4):
        layers.append(Layer(f"enc{i}.down", "dwsep", (prev,), ch, w[i], stride=2))
        layers.append(Layer(f"enc{i}.conv", "dwsep", (f"enc{i}.down",), w[i], w[i], relu=True))
        prev, ch = f"enc{i}.conv", w[i]
        skips.append(prev)
    skip_ch = [w[0]] + list(w)
    for i in reversed(range(4)):
        sc = skip_ch[i]
        layers.append(Layer(f"dec{i}.up", "deconv", (prev,), ch, sc))
        layers.append(Layer(f"dec{i}.cat", "concat", (f"dec{i}.up", skips[i]), 2 * sc, 2 * sc))
        layers.append(Layer(f"dec{i}.conv", "dwsep", (f"dec{i}.cat",), 2 * sc, sc, relu=True))
        prev, ch = f"dec{i}.conv", sc
    layers.append(Layer("head", "conv", (prev,), ch, cfg.out_channels))
    meta = {"widths": list(w), "noise_map": "full resolution, last input channel"}
    return ModelSpec("flexible", tuple(layers), cfg.in_channels, cfg.out_channels, 16, meta)


# ----------------------------------------------------------------------------
# parameters and execution


def init_params(spec: ModelSpec, seed: int = 0, zero_head: bool = False) -> dict:
    """Kaiming-uniform (fan-in) weights, zero biases, identity batch norm.

    ``zero_head`` zeroes the last layer so the network starts as an exact
    zero-residual map.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for layer in spec.layers:
        for name, shape in layer.param_shapes().items():
            suffix = name[len(layer.name) + 1:]
            if suffix in ("weight", "depthwise", "pointwise"):
                if suffix == "depthwise":
                    fan_in = shape[2] * shape[3]
                elif layer.kind == "deconv":
                    fan_in = shape[0]
                else:
                    fan_in = shape[1] * shape[2] * shape[3]
                bound = math.sqrt(6.0 / fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            elif suffix in ("bn.gamma", "bn.running_var"):
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[name] = arr.astype(np.float32)
    if zero_head and spec.layers:
        for name in spec.layers[-1].param_shapes():
            params[name] = np.zeros_like(params[name])
    return params


def check_params(spec: ModelSpec, params: dict) -> None:
    for name, shape in spec.param_shapes().items():
        if name not in params:
            raise KeyError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


@dataclass
class Tape:
    caches: dict = field(default_factory=dict)
    bn_updates: dict = field(default_factory=dict)


def _layer_forward(layer: Layer, params: dict, inputs: list, training: bool, tape):
    n = layer.name
    p = params.get
    if layer.kind == "concat":
        out, sizes = F.concat_channels(*inputs)
        cache = {"concat": sizes}
        if tape is not None:
            tape.caches[n] = cache
        return out
    x = inputs[0]
    cache = {}
    if layer.kind == "conv":
        out, cache["core"] = F.conv2d(x, params[f"{n}.weight"], p(f"{n}.bias"), stride=layer.stride)
    elif layer.kind == "dwsep":
        out, cache["core"] = F.dwsep_conv(x, params[f"{n}.depthwise"], params[f"{n}.pointwise"],
                                          p(f"{n}.bias"), stride=layer.stride)
    else:
        out, cache["core"] = F.deconv2x2(x, params[f"{n}.weight"], p(f"{n}.bias"))
    if layer.bn:
        out, cache["bn"], stats = F.batchnorm(
            out, params[f"{n}.bn.gamma"], params[f"{n}.bn.beta"],
            params[f"{n}.bn.running_mean"], params[f"{n}.bn.running_var"], training,
        )
        if tape is not None and training:
            tape.bn_updates[n] = stats
    if layer.relu:
        out, cache["relu"] = F.relu(out)
    if tape is not None:
        tape.caches[n] = cache
    return out


def _run(spec: ModelSpec, params: dict, x: np.ndarray, training: bool, tape):
    spec.infer_shapes(x.shape)
    check_params(spec, params)
    values = {INPUT: x}
    remaining = {}
    for layer in spec.layers:
        for s in layer.inputs:
            remaining[s] = remaining.get(s, 0) + 1
    for layer in spec.layers:
        values[layer.name] = _layer_forward(layer, params, [values[s] for s in layer.inputs],
                                            training, tape)
        for s in layer.inputs:
            remaining[s] -= 1
            if remaining[s] == 0 and s != INPUT:
                del values[s]
    return values[spec.output]


def forward(spec: ModelSpec, params: dict, x: np.ndarray, training: bool = False) -> np.ndarray:
    """Pure forward pass; batch-norm running statistics are left untouched."""
    return _run(spec, params, x, training, None)


def forward_train(spec: ModelSpec, params: dict, x: np.ndarray, training: bool = True):
    """Forward pass that records the caches :func:`backward` needs."""
    tape = Tape()
    out = _run(spec, params, x, training, tape)
    return out, tape


def backward(spec: ModelSpec, params: dict, tape: Tape, dout: np.ndarray):
    """Gradients of every trainable parameter plus the input gradient."""
    grads = {}
    upstream = {spec.output: dout}
    for layer in reversed(spec.layers):
        n = layer.name
        dy = upstream.pop(n, None)
        if dy is None:
            continue
        cache = tape.caches[n]
        if layer.kind == "concat":
            douts = F.concat_backward(dy, cache["concat"])
        else:
            if layer.relu:
                dy = F.relu_backward(dy, cache["relu"])
            if layer.bn:
                dy, grads[f"{n}.bn.gamma"], grads[f"{n}.bn.beta"] = F.batchnorm_backward(dy, cache["bn"])
            if layer.kind == "conv":
                dx, grads[f"{n}.weight"], db = F.conv2d_backward(dy, cache["core"])
            elif layer.kind == "dwsep":
                dx, grads[f"{n}.depthwise"], grads[f"{n}.pointwise"], db = F.dwsep_conv_backward(
                    dy, cache["core"])
            else:
                dx, grads[f"{n}.weight"], db = F.deconv2x2_backward(dy, cache["core"])
            if layer.bias:
                grads[f"{n}.bias"] = db
            douts = [dx]
        for src, g in zip(layer.inputs, douts):
            upstream[src] = upstream[src] + g if src in upstream else g
    dinput = upstream.get(INPUT)
    return grads, dinput
