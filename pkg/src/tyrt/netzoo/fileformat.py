"""TYRT model files: graph description plus weights in one little-endian binary.

Layout::

    magic  b"TYRT"
    u16    format version (1)
    u16    flags  bit0 float master weights present, bit1 int8 weights present
    graph block   header fields, head list, layer records
    [float block] per conv layer in graph order: f32 weights, f32 bias
    [int8 block]  u32 n + n * (str tensor, f64 scale, i8 zero_point)
                  then per conv layer: f64 weight scale, i8 weights, i32 bias

Strings are u16 length + UTF-8 bytes. Array lengths are implied by the layer
records, so the reader validates them against the graph.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..tensor import QParams
from .graph import GraphSpec, LayerSpec, count_macs, count_params, layer_macs, layer_params
from .weights import QuantConv, WeightStore, weight_shape

MAGIC = b"TYRT"
FORMAT_VERSION = 1
FLAG_FLOAT, FLAG_INT8 = 1, 2

_KINDS = ("input", "conv", "maxpool", "upsample", "concat", "slice", "add")
_ACTS = (None, "silu", "leaky")


class FormatError(ValueError):
    pass


class _W:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def str(self, s: str):
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.buf.write(b)

    def array(self, arr: np.ndarray, dtype: str):
        self.buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


class _R:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated file")
        vals = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def str(self) -> str:
        n = self.unpack("H")
        s = self.data[self.pos:self.pos + n]
        if len(s) != n:
            raise FormatError("truncated string")
        self.pos += n
        return s.decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        nbytes = dt.itemsize * count
        if self.pos + nbytes > len(self.data):
            raise FormatError("truncated array")
        arr = np.frombuffer(self.data, dtype=dt, count=count, offset=self.pos).astype(dtype)
        self.pos += nbytes
        return arr


def _write_layer(w: _W, layer: LayerSpec):
    w.str(layer.name)
    w.pack("B", _KINDS.index(layer.kind))
    w.str(layer.block)
    w.str(layer.block_kind)
    w.pack("B", len(layer.inputs))
    for src in layer.inputs:
        w.str(src)
    p = layer.params
    if layer.kind == "input":
        w.pack("H", p["channels"])
    elif layer.kind == "conv":
        w.pack("HH6BHB", p["in_channels"], p["out_channels"], *p["kernel"], *p["stride"],
               *p["padding"], p["groups"], _ACTS.index(p["act"]))
    elif layer.kind == "maxpool":
        w.pack("3B", p["kernel"], p["stride"], p.get("padding", 0))
    elif layer.kind == "upsample":
        w.pack("B", p["factor"])
    elif layer.kind == "slice":
        w.pack("HH", p["start"], p["stop"])


def _read_layer(r: _R) -> LayerSpec:
    name = r.str()
    kind = _KINDS[r.unpack("B")]
    block, block_kind = r.str(), r.str()
    inputs = tuple(r.str() for _ in range(r.unpack("B")))
    if kind == "input":
        params = {"channels": r.unpack("H")}
    elif kind == "conv":
        ci, co, kh, kw, sh, sw, ph, pw, g, act = r.unpack("HH6BHB")
        params = {"in_channels": ci, "out_channels": co, "kernel": (kh, kw), "stride": (sh, sw),
                  "padding": (ph, pw), "groups": g, "act": _ACTS[act]}
    elif kind == "maxpool":
        k, s, p = r.unpack("3B")
        params = {"kernel": k, "stride": s, "padding": p}
    elif kind == "upsample":
        params = {"factor": r.unpack("B")}
    elif kind == "slice":
        a, b = r.unpack("HH")
        params = {"start": a, "stop": b}
    else:
        params = {}
    return LayerSpec(name, kind, inputs, params, block, block_kind)


def dumps(g: GraphSpec, ws: WeightStore | None = None) -> bytes:
    ws = ws or WeightStore()
    flags = (FLAG_FLOAT if ws.float_weights else 0) | (FLAG_INT8 if ws.is_quantized else 0)
    w = _W()
    w.buf.write(MAGIC)
    w.pack("HH", FORMAT_VERSION, flags)
    for s in (g.version, g.size, g.activation, g.head_kind):
        w.str(s)
    w.pack("ddII", g.width_multiple, g.depth_multiple, g.num_classes, g.input_resolution)
    w.pack("H", len(g.outputs))
    for name, stride in zip(g.outputs, g.head_strides):
        w.str(name)
        w.pack("H", stride)
    w.pack("I", len(g.layers))
    for layer in g.layers:
        _write_layer(w, layer)
    convs = g.conv_layers
    if flags & FLAG_FLOAT:
        ws.check(g)
        for layer in convs:
            wt, b = ws.float_weights[layer.name]
            w.array(wt, "f4")
            w.array(b, "f4")
    if flags & FLAG_INT8:
        ws.check(g, quantized=True)
        names = sorted(ws.tensor_qparams)
        w.pack("I", len(names))
        for name in names:
            q = ws.tensor_qparams[name]
            w.str(name)
            w.pack("db", q.scale, q.zero_point)
        for layer in convs:
            qc = ws.quant[layer.name]
            w.pack("d", qc.weight_qparams.scale)
            w.array(qc.weights, "i1")
            w.array(qc.bias, "i4")
    return w.buf.getvalue()


def loads(data: bytes) -> tuple[GraphSpec, WeightStore]:
    if data[:4] != MAGIC:
        raise FormatError("not a TYRT file (bad magic)")
    r = _R(data)
    r.pos = 4
    version, flags = r.unpack("HH")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    gver, size, act, head_kind = r.str(), r.str(), r.str(), r.str()
    width, depth, nc, res = r.unpack("ddII")
    outputs, strides = [], []
    for _ in range(r.unpack("H")):
        outputs.append(r.str())
        strides.append(r.unpack("H"))
    layers = [_read_layer(r) for _ in range(r.unpack("I"))]
    g = GraphSpec(version=gver, size=size, width_multiple=width, depth_multiple=depth,
                  num_classes=nc, input_resolution=res, layers=layers, outputs=outputs,
                  head_strides=strides, head_kind=head_kind, activation=act)
    ws = WeightStore()
    convs = g.conv_layers
    if flags & FLAG_FLOAT:
        for layer in convs:
            shape = weight_shape(layer)
            wt = r.array("f4", int(np.prod(shape))).reshape(shape)
            ws.float_weights[layer.name] = (wt, r.array("f4", shape[0]))
    if flags & FLAG_INT8:
        for _ in range(r.unpack("I")):
            name = r.str()
            scale, zp = r.unpack("db")
            ws.tensor_qparams[name] = QParams(scale, zp)
        for layer in convs:
            shape = weight_shape(layer)
            wscale = r.unpack("d")
            wt = r.array("i1", int(np.prod(shape))).reshape(shape)
            ws.quant[layer.name] = QuantConv(wt, r.array("i4", shape[0]), QParams(wscale, 0))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes")
    return g, ws


def save(path, g: GraphSpec, ws: WeightStore | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(g, ws))
    return path


def load(path) -> tuple[GraphSpec, WeightStore]:
    return loads(Path(path).read_bytes())


def manifest(g: GraphSpec, ws: WeightStore | None = None) -> str:
    """Human-readable mirror of a model file: layers, shapes, params, MACs."""
    lines = [
        f"model      TinyissimoYOLO {g.version} {g.size}",
        f"classes    {g.num_classes}",
        f"input      3x{g.input_resolution}x{g.input_resolution}",
        f"multiples  width={g.width_multiple:g} depth={g.depth_multiple:g}",
        f"activation {g.activation}",
        "heads      " + ", ".join(f"{n}@stride{s}" for n, s in zip(g.outputs, g.head_strides)),
        f"weights    {'float' if ws and ws.float_weights else '-'} / {'int8' if ws and ws.is_quantized else '-'}",
        f"params     {count_params(g)}",
        f"macs       {count_macs(g)}",
        "",
        f"{'layer':<24} {'kind':<9} {'block':<12} {'out shape':<14} {'params':>8} {'macs':>11}",
    ]
    for layer in g.layers:
        c, h, w = g.shapes[layer.name]
        lines.append(f"{layer.name:<24} {layer.kind:<9} {layer.block_kind:<12} {f'{c}x{h}x{w}':<14} "
                     f"{layer_params(layer):>8} {layer_macs(g, layer):>11}")
    return "\n".join(lines) + "\n"
