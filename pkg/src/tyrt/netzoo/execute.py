"""Topologically ordered graph execution, int8 and float reference."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from ..tensor import (
    ACTIVATION_FUNCS, QuantTensor, act_q, add_q, concat_channels, conv2d_q, correlate,
    maxpool2d, requantize, slice_channels, upsample_nearest,
)
from .graph import GraphError, GraphSpec, LayerSpec
from .weights import WeightStore

if TYPE_CHECKING:
    from ..planner import TileSchedule


def _check_input(g: GraphSpec, shape) -> None:
    want = (1, *g.shapes[g.input_name])
    if tuple(shape) != want:
        raise GraphError(f"input shape {tuple(shape)} != {want}")


def run_layer_q(layer: LayerSpec, inputs: list[QuantTensor], ws: WeightStore) -> QuantTensor:
    """Execute one layer on int8 tensors (untiled)."""
    p = layer.params
    if layer.kind == "conv":
        y = conv2d_q(inputs[0], ws.conv_desc(layer))
        if p["act"]:
            y = act_q(y, p["act"], ws.tensor_qparams[layer.name])
        return y
    if layer.kind == "maxpool":
        return maxpool2d(inputs[0], p["kernel"], p["stride"], p.get("padding", 0))
    if layer.kind == "upsample":
        return upsample_nearest(inputs[0], p["factor"])
    if layer.kind == "slice":
        return slice_channels(inputs[0], p["start"], p["stop"])
    if layer.kind == "concat":
        q = ws.tensor_qparams[layer.name]
        return concat_channels(*[requantize(t, q) for t in inputs])
    if layer.kind == "add":
        return add_q(inputs[0], inputs[1], ws.tensor_qparams[layer.name])
    raise GraphError(f"cannot execute layer kind {layer.kind!r}")


def forward_all(g: GraphSpec, ws: WeightStore, x: QuantTensor,
                schedule: "TileSchedule | None" = None) -> dict[str, QuantTensor]:
    """Run the int8 graph and return every intermediate tensor by layer name."""
    _check_input(g, x.shape)
    if not ws.is_quantized:
        raise GraphError("weight store is not quantized; run calibration first")
    if x.qparams != ws.tensor_qparams[g.input_name]:
        x = requantize(x, ws.tensor_qparams[g.input_name])
    if schedule is not None:
        from ..planner import run_layer_tiled
    acts: dict[str, QuantTensor] = {g.input_name: x}
    for layer in g.layers[1:]:
        ins = [acts[s] for s in layer.inputs]
        if schedule is None:
            acts[layer.name] = run_layer_q(layer, ins, ws)
        else:
            acts[layer.name] = run_layer_tiled(layer, ins, ws, schedule.layers[layer.name])
    return acts


def forward(g: GraphSpec, ws: WeightStore, x: QuantTensor,
            schedule: "TileSchedule | None" = None) -> list[QuantTensor]:
    """Int8 inference; one head tensor per detection scale (see ``g.head_strides``)."""
    acts = forward_all(g, ws, x, schedule)
    return [acts[name] for name in g.outputs]


def forward_float(g: GraphSpec, ws: WeightStore, x: np.ndarray) -> dict[str, np.ndarray]:
    """Float64 execution with the master weights; conv pre-activations stored as ``name:pre``."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(g, x.shape)
    acts: dict[str, np.ndarray] = {g.input_name: x}
    for layer in g.layers[1:]:
        ins = [acts[s] for s in layer.inputs]
        p = layer.params
        if layer.kind == "conv":
            w, b = ws.float_weights[layer.name]
            ph, pw = p["padding"]
            xp = np.pad(ins[0], ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            y = correlate(xp, w, p["stride"], p["groups"]) + b.reshape(1, -1, 1, 1)
            if p["act"]:
                acts[f"{layer.name}:pre"] = y
                y = ACTIVATION_FUNCS[p["act"]](y)
            acts[layer.name] = y
        elif layer.kind == "maxpool":
            k, s, pad = p["kernel"], p["stride"], p.get("padding", 0)
            xp = np.pad(ins[0], ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
            win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            acts[layer.name] = win.max(axis=(4, 5))
        elif layer.kind == "upsample":
            f = p["factor"]
            acts[layer.name] = ins[0].repeat(f, axis=2).repeat(f, axis=3)
        elif layer.kind == "slice":
            acts[layer.name] = ins[0][:, p["start"]:p["stop"]]
        elif layer.kind == "concat":
            acts[layer.name] = np.concatenate(ins, axis=1)
        elif layer.kind == "add":
            acts[layer.name] = ins[0] + ins[1]
        else:
            raise GraphError(f"cannot execute layer kind {layer.kind!r}")
    return acts
