"""Layer graph description, shape propagation and parameter/MAC counting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

VERSIONS = ("v1_3", "v5", "v8", "v10")
LAYER_KINDS = ("input", "conv", "maxpool", "upsample", "concat", "slice", "add")
BLOCK_KINDS = (
    "input", "conv", "c3_block", "c2f_block", "c2fcib_block", "sppf", "scdown",
    "detect_v8", "detect_v10", "maxpool", "upsample", "concat",
)
ACTIVATIONS = ("silu", "leaky")


class GraphError(ValueError):
    """Raised for malformed graphs or impossible shape propagation."""


@dataclass(frozen=True)
class LayerSpec:
    """One executable layer.

    ``params`` by kind:
      conv     in_channels, out_channels, kernel, stride, padding, groups, act (None|"silu"|"leaky")
      maxpool  kernel, stride, padding
      upsample factor
      slice    start, stop (channel range)
      input    channels
    ``block``/``block_kind`` tag the architectural block (C3, C2F, detect...) the layer belongs to.
    """

    name: str
    kind: str
    inputs: tuple[str, ...]
    params: dict[str, Any] = field(default_factory=dict)
    block: str = ""
    block_kind: str = ""


@dataclass
class GraphSpec:
    version: str
    size: str
    width_multiple: float
    depth_multiple: float
    num_classes: int
    input_resolution: int
    layers: list[LayerSpec]
    outputs: list[str]
    head_strides: list[int]
    head_kind: str = "detect_v8"
    activation: str = "silu"
    shapes: dict[str, tuple[int, int, int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {}
        for layer in self.layers:
            if layer.name in self._index:
                raise GraphError(f"duplicate layer name {layer.name!r}")
            self._index[layer.name] = layer
        self.validate()

    def __getitem__(self, name: str) -> LayerSpec:
        return self._index[name]

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def input_name(self) -> str:
        return self.layers[0].name

    @property
    def total_stride(self) -> int:
        return max(self.head_strides)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {l.name: [] for l in self.layers}
        for l in self.layers:
            for src in l.inputs:
                out[src].append(l.name)
        return out

    def validate(self) -> None:
        """Check topological order, acyclicity and propagate shapes."""
        if not self.layers or self.layers[0].kind != "input":
            raise GraphError("graph must start with exactly one input layer")
        if sum(l.kind == "input" for l in self.layers) != 1:
            raise GraphError("graph must have exactly one input layer")
        if not self.outputs:
            raise GraphError("graph has no outputs")
        r = self.input_resolution
        if r <= 0 or r % self.total_stride:
            raise GraphError(
                f"input resolution {r} not divisible by total stride {self.total_stride}")
        shapes: dict[str, tuple[int, int, int]] = {}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise GraphError(f"{layer.name}: unknown layer kind {layer.kind!r}")
            for src in layer.inputs:
                # defined-before-use on a list order implies acyclicity
                if src not in shapes:
                    raise GraphError(f"{layer.name}: input {src!r} undefined or not earlier in order")
            shapes[layer.name] = _infer_shape(layer, [shapes[s] for s in layer.inputs], r)
        for name in self.outputs:
            if name not in shapes:
                raise GraphError(f"unknown output {name!r}")
        for name, stride in zip(self.outputs, self.head_strides):
            c, h, w = shapes[name]
            if c != 4 + self.num_classes or h * stride != r or w * stride != r:
                raise GraphError(f"head {name} shape {(c, h, w)} breaks detect-head contract")
        self.shapes = shapes

    def output_shape(self, name: str) -> tuple[int, int, int]:
        return self.shapes[name]


def _out_dim(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _infer_shape(layer: LayerSpec, ins: list[tuple[int, int, int]], res: int) -> tuple[int, int, int]:
    p = layer.params
    if layer.kind == "input":
        return (p["channels"], res, res)
    if layer.kind in ("conv", "maxpool", "upsample", "slice") and len(ins) != 1:
        raise GraphError(f"{layer.name}: expects one input, got {len(ins)}")
    if layer.kind == "conv":
        c, h, w = ins[0]
        if c != p["in_channels"]:
            raise GraphError(f"{layer.name}: in_channels {p['in_channels']} != producer channels {c}")
        g = p.get("groups", 1)
        if c % g or p["out_channels"] % g:
            raise GraphError(f"{layer.name}: channels not divisible by groups {g}")
        (kh, kw), (sh, sw), (ph, pw) = p["kernel"], p["stride"], p["padding"]
        ho, wo = _out_dim(h, kh, sh, ph), _out_dim(w, kw, sw, pw)
        if ho < 1 or wo < 1:
            raise GraphError(f"{layer.name}: output dimension < 1")
        return (p["out_channels"], ho, wo)
    if layer.kind == "maxpool":
        c, h, w = ins[0]
        k, s, pad = p["kernel"], p["stride"], p.get("padding", 0)
        ho, wo = _out_dim(h, k, s, pad), _out_dim(w, k, s, pad)
        if ho < 1 or wo < 1:
            raise GraphError(f"{layer.name}: output dimension < 1")
        return (c, ho, wo)
    if layer.kind == "upsample":
        c, h, w = ins[0]
        return (c, h * p["factor"], w * p["factor"])
    if layer.kind == "slice":
        c, h, w = ins[0]
        if not 0 <= p["start"] < p["stop"] <= c:
            raise GraphError(f"{layer.name}: bad channel slice {p['start']}:{p['stop']} of {c}")
        return (p["stop"] - p["start"], h, w)
    if layer.kind == "concat":
        if len({s[1:] for s in ins}) != 1:
            raise GraphError(f"{layer.name}: concat spatial mismatch {ins}")
        return (sum(s[0] for s in ins), ins[0][1], ins[0][2])
    if layer.kind == "add":
        if len(set(ins)) != 1 or len(ins) != 2:
            raise GraphError(f"{layer.name}: add needs two equal shapes, got {ins}")
        return ins[0]
    raise GraphError(f"{layer.name}: unknown kind {layer.kind}")


def conv_params(p: dict) -> int:
    kh, kw = p["kernel"]
    g = p.get("groups", 1)
    return kh * kw * (p["in_channels"] // g) * p["out_channels"] + p["out_channels"]


def conv_macs(p: dict, out_hw: tuple[int, int]) -> int:
    kh, kw = p["kernel"]
    g = p.get("groups", 1)
    return kh * kw * (p["in_channels"] // g) * p["out_channels"] * out_hw[0] * out_hw[1]


def layer_params(layer: LayerSpec) -> int:
    return conv_params(layer.params) if layer.kind == "conv" else 0


def layer_macs(g: GraphSpec, layer: LayerSpec) -> int:
    if layer.kind != "conv":
        return 0
    return conv_macs(layer.params, g.shapes[layer.name][1:])


def count_params(g: GraphSpec) -> int:
    """Exact number of weights plus biases over all conv layers."""
    return sum(layer_params(l) for l in g.layers)


def count_macs(g: GraphSpec) -> int:
    """Multiply-accumulates for one inference; only convolutions contribute."""
    return sum(layer_macs(g, l) for l in g.layers)
