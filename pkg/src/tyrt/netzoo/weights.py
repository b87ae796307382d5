"""Per-layer weights: float master copy plus the int8 deployment copy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import ConvDesc, QParams, round_half_away
from .graph import GraphError, GraphSpec, LayerSpec


class MissingWeights(GraphError):
    pass


@dataclass
class QuantConv:
    weights: np.ndarray  # int8 (O, C/g, kh, kw)
    bias: np.ndarray  # int32
    weight_qparams: QParams


@dataclass
class WeightStore:
    """Weights for every conv layer of one graph.

    ``float_weights`` maps layer name to (weights, bias) float arrays and is the
    calibration master. ``quant`` holds the int8 copy once quantized and
    ``tensor_qparams`` the activation quantization of every tensor (conv
    layers with an activation also have a ``"<name>:pre"`` entry).
    """

    float_weights: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    quant: dict[str, QuantConv] = field(default_factory=dict)
    tensor_qparams: dict[str, QParams] = field(default_factory=dict)

    @property
    def is_quantized(self) -> bool:
        return bool(self.quant) and bool(self.tensor_qparams)

    def check(self, g: GraphSpec, quantized: bool = False) -> None:
        names = {l.name for l in g.conv_layers}
        have = set(self.quant if quantized else self.float_weights)
        if names - have:
            raise MissingWeights(f"missing weights for {sorted(names - have)[:5]}")
        if have - names:
            raise GraphError(f"weights for unknown layers {sorted(have - names)[:5]}")
        for layer in g.conv_layers:
            shape = weight_shape(layer)
            arr = self.quant[layer.name].weights if quantized else self.float_weights[layer.name][0]
            if arr.shape != shape:
                raise GraphError(f"{layer.name}: weight shape {arr.shape} != {shape}")

    def conv_desc(self, layer: LayerSpec) -> ConvDesc:
        qc = self.quant.get(layer.name)
        if qc is None:
            raise MissingWeights(f"no quantized weights for {layer.name}")
        p = layer.params
        out_key = f"{layer.name}:pre" if p["act"] else layer.name
        return ConvDesc(p["in_channels"], p["out_channels"], p["kernel"], p["stride"], p["padding"],
                        qc.weights, qc.bias, qc.weight_qparams, self.tensor_qparams[out_key],
                        groups=p["groups"])


def weight_shape(layer: LayerSpec) -> tuple[int, int, int, int]:
    p = layer.params
    kh, kw = p["kernel"]
    return (p["out_channels"], p["in_channels"] // p["groups"], kh, kw)


def init_weights(g: GraphSpec, seed: int = 0) -> WeightStore:
    """Random float master weights, scaled so activations stay O(1) through depth."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for layer in g.conv_layers:
        shape = weight_shape(layer)
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.normal(0.0, 1.6 / np.sqrt(fan_in), size=shape)
        b = rng.normal(0.0, 0.05, size=shape[0])
        if layer.name.endswith("cls2"):
            b -= 2.0  # sparse class confidences out of the box
        elif layer.name.endswith("box2"):
            b += 1.0  # boxes about two strides wide
        store.float_weights[layer.name] = (w.astype(np.float32), b.astype(np.float32))
    return store


def zero_weights(g: GraphSpec) -> WeightStore:
    store = WeightStore()
    for layer in g.conv_layers:
        shape = weight_shape(layer)
        store.float_weights[layer.name] = (np.zeros(shape, np.float32), np.zeros(shape[0], np.float32))
    return store


def quantize_weight_symmetric(w: np.ndarray) -> tuple[np.ndarray, QParams]:
    """Per-tensor symmetric int8 weights in [-127, 127]."""
    w = np.asarray(w, dtype=np.float64)
    max_abs = float(np.max(np.abs(w))) if w.size else 0.0
    q = QParams(max_abs / 127.0 if max_abs > 0 else 1.0 / 127.0, 0)
    codes = np.clip(round_half_away(w / q.scale), -127, 127).astype(np.int8)
    return codes, q


def quantize_bias(b: np.ndarray, input_scale: float, weight_scale: float) -> np.ndarray:
    acc = round_half_away(np.asarray(b, dtype=np.float64) / (input_scale * weight_scale))
    info = np.iinfo(np.int32)
    return np.clip(acc, info.min, info.max).astype(np.int32)
