"""Post-training quantization: min/max calibration and int8 graph emission."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .netzoo.execute import forward_all, forward_float
from .netzoo.graph import GraphSpec
from .netzoo.weights import QuantConv, WeightStore, quantize_bias, quantize_weight_symmetric
from .tensor import INT8_MAX, INT8_MIN, QParams, dequantize, quantize, round_half_away

PASS_THROUGH = ("maxpool", "upsample", "slice")


class CalibrationError(ValueError):
    pass


@dataclass
class CalibStats:
    """Running range of one tensor; merging is associative and commutative."""

    min: float = np.inf
    max: float = -np.inf
    count: int = 0

    def update(self, arr: np.ndarray) -> "CalibStats":
        arr = np.asarray(arr)
        if arr.size:
            self.min = min(self.min, float(arr.min()))
            self.max = max(self.max, float(arr.max()))
        self.count += 1
        return self

    def merge(self, other: "CalibStats") -> "CalibStats":
        return CalibStats(min(self.min, other.min), max(self.max, other.max), self.count + other.count)

    def qparams(self) -> QParams:
        if self.count < 1:
            raise CalibrationError("no samples observed")
        # the range always contains 0 so that padding and ReLU-like zeros are exact
        lo, hi = min(self.min, 0.0), max(self.max, 0.0)
        scale = (hi - lo) / 255.0
        if not scale > 0.0:  # degenerate or subnormal range
            scale = 1.0 / 255.0
        zp = float(round_half_away(np.float64(-128.0 - lo / scale)))
        return QParams(scale, int(np.clip(zp, INT8_MIN, INT8_MAX)))


def collect_stats(g: GraphSpec, ws: WeightStore, images: Iterable[np.ndarray]) -> dict[str, CalibStats]:
    stats: dict[str, CalibStats] = {}
    n = 0
    for img in images:
        n += 1
        for name, arr in forward_float(g, ws, img).items():
            stats.setdefault(name, CalibStats()).update(arr)
    if n == 0:
        raise CalibrationError("empty calibration set")
    return stats


def qparams_from_stats(g: GraphSpec, stats: dict[str, CalibStats]) -> dict[str, QParams]:
    qp: dict[str, QParams] = {}
    for layer in g.layers:
        if layer.kind in PASS_THROUGH:
            qp[layer.name] = qp[layer.inputs[0]]  # order-preserving ops keep the producer's grid
            continue
        qp[layer.name] = stats[layer.name].qparams()
        if layer.kind == "conv" and layer.params["act"]:
            qp[f"{layer.name}:pre"] = stats[f"{layer.name}:pre"].qparams()
    return qp


def calibrate(g: GraphSpec, ws: WeightStore, images: Sequence[np.ndarray]) -> dict[str, QParams]:
    """Per-tensor activation QParams from float runs over ``images``."""
    if not ws.float_weights:
        raise CalibrationError("float master weights required for calibration")
    ws.check(g)
    return qparams_from_stats(g, collect_stats(g, ws, images))


def quantize_model(g: GraphSpec, ws: WeightStore, qparams: dict[str, QParams]) -> WeightStore:
    """Emit int8 weights/int32 biases against calibrated activation grids."""
    out = WeightStore(float_weights=dict(ws.float_weights), tensor_qparams=dict(qparams))
    for layer in g.conv_layers:
        w, b = ws.float_weights[layer.name]
        codes, wq = quantize_weight_symmetric(w)
        in_scale = qparams[layer.inputs[0]].scale
        out.quant[layer.name] = QuantConv(codes, quantize_bias(b, in_scale, wq.scale), wq)
    return out


def ptq(g: GraphSpec, ws: WeightStore, images: Sequence[np.ndarray]) -> WeightStore:
    return quantize_model(g, ws, calibrate(g, ws, images))


@dataclass
class TensorError:
    max_abs: float
    rmse: float
    step: float  # output quantization step of the tensor

    @property
    def rmse_steps(self) -> float:
        return self.rmse / self.step


def quant_error(g: GraphSpec, ws: WeightStore, images: Sequence[np.ndarray]) -> dict[str, TensorError]:
    """Float forward vs dequantized int8 forward, per layer output, pooled over images."""
    sq: dict[str, float] = {}
    cnt: dict[str, int] = {}
    mx: dict[str, float] = {}
    for img in images:
        ref = forward_float(g, ws, img)
        acts = forward_all(g, ws, quantize(img, ws.tensor_qparams[g.input_name]))
        for name, t in acts.items():
            d = dequantize(t) - ref[name]
            sq[name] = sq.get(name, 0.0) + float(np.sum(d * d))
            cnt[name] = cnt.get(name, 0) + d.size
            mx[name] = max(mx.get(name, 0.0), float(np.max(np.abs(d))) if d.size else 0.0)
    return {
        name: TensorError(mx[name], float(np.sqrt(sq[name] / max(cnt[name], 1))),
                          ws.tensor_qparams[name].scale)
        for name in sq
    }


def format_calibration_report(g: GraphSpec, ws: WeightStore,
                              errors: dict[str, TensorError] | None = None) -> str:
    lines = [f"{'tensor':<28} {'scale':>12} {'zp':>5} {'min':>10} {'max':>10}"
             + (f" {'max_abs':>10} {'rmse':>10} {'steps':>6}" if errors else "")]
    for layer in g.layers:
        q = ws.tensor_qparams[layer.name]
        row = f"{layer.name:<28} {q.scale:>12.6g} {q.zero_point:>5d} {q.real_min:>10.4g} {q.real_max:>10.4g}"
        if errors and layer.name in errors:
            e = errors[layer.name]
            row += f" {e.max_abs:>10.4g} {e.rmse:>10.4g} {e.rmse_steps:>6.2f}"
        lines.append(row)
    return "\n".join(lines) + "\n"
