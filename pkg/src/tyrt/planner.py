"""Static memory planner: per-layer tiling under L1/L2/L3 byte budgets.

Each layer's output is partitioned into rectangular tiles (row range, column
range, output-channel range). A tile's resident L1 set is its input region
(including halo), the weights of its channel block and its output block;
with double buffering the input and output buffers are held twice so the
next tile's transfers overlap the current tile's compute.

Tile growth is greedy and deterministic: full-width, all-channel row bands
are made as tall as L1 allows; if a single such row does not fit, the band
is one row high and the width grows instead; if one full-channel pixel does
not fit, the output-channel block grows on a single pixel. Halo rows are
re-fetched for every tile, not cached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .netzoo.graph import GraphSpec, LayerSpec
from .tensor import (
    INT8_MIN, QuantTensor, act_q, add_q, concat_channels, conv2d_q, maxpool2d, requantize,
    upsample_nearest,
)

L1, L2, L3 = "l1", "l2", "l3"
BIAS_BYTES = 4


class InfeasibleBudget(ValueError):
    def __init__(self, layer: str, need: int, have: int, what: str = "l1"):
        super().__init__(f"layer {layer!r}: minimal tile needs {need} bytes of {what}, budget is {have}")
        self.layer, self.need, self.have = layer, need, have


@dataclass(frozen=True)
class MemBudget:
    l1_bytes: int
    l2_bytes: int
    l3_bytes: int

    def __post_init__(self):
        if self.l1_bytes <= 0:
            raise ValueError("l1_bytes must be positive")
        if not self.l1_bytes <= self.l2_bytes <= self.l3_bytes:
            raise ValueError("budgets must satisfy l1 <= l2 <= l3")


# GAP9-like defaults: 128 kB cluster L1, 1.5 MB L2, 8 MB external L3
GAP9_BUDGET = MemBudget(128 * 1024, 1536 * 1024, 8 * 1024 * 1024)


@dataclass(frozen=True)
class Region:
    """Half-open rectangle of one tensor: channels x rows x cols, plus zero-padding amounts."""

    c0: int
    c1: int
    y0: int
    y1: int
    x0: int
    x1: int
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right

    @property
    def nbytes(self) -> int:
        return (self.c1 - self.c0) * (self.y1 - self.y0) * (self.x1 - self.x0)


@dataclass(frozen=True)
class Tile:
    out: Region
    inputs: tuple[Region, ...]
    weight_bytes: int
    macs: int

    @property
    def in_bytes(self) -> int:
        return sum(r.nbytes for r in self.inputs)

    @property
    def out_bytes(self) -> int:
        return self.out.nbytes

    def resident_bytes(self, double_buffer: bool) -> int:
        io_bytes = self.in_bytes + self.out_bytes
        return (2 * io_bytes if double_buffer else io_bytes) + self.weight_bytes


@dataclass(frozen=True)
class Transfer:
    nbytes: int
    src: str
    dst: str
    tile: int  # -1: layer-level staging, not overlapped with compute


@dataclass
class LayerSchedule:
    name: str
    kind: str
    tiles: list[Tile]
    transfers: list[Transfer]
    double_buffer: bool
    tile_shape: tuple[int, int, int]  # rows, cols, channels of a full tile
    activations_in_l3: bool = False

    @property
    def max_resident(self) -> int:
        return max(t.resident_bytes(self.double_buffer) for t in self.tiles)


@dataclass
class TileSchedule:
    budget: MemBudget
    layers: dict[str, LayerSchedule] = field(default_factory=dict)
    weights_l2_resident: bool = True

    @property
    def total_tiles(self) -> int:
        return sum(len(s.tiles) for s in self.layers.values())

    @property
    def total_macs(self) -> int:
        return sum(t.macs for s in self.layers.values() for t in s.tiles)


@dataclass(frozen=True)
class MachineModel:
    """Operating point and throughput knobs of the modeled accelerator.

    ``bytes_per_cycle`` maps (src, dst) level pairs to DMA throughput; an
    infinite rate makes that transfer free. The DVFS coefficients give
    P(V, f) = c_dyn * V^2 * f + leak_w_per_v * V (watts).
    """

    frequency_hz: float = 370e6
    voltage_v: float = 0.8
    macs_per_cycle_peak: float = 48.0
    bytes_per_cycle: dict = field(default_factory=lambda: {
        (L3, L2): 1.0, (L2, L3): 1.0, (L2, L1): 8.0, (L1, L2): 8.0,
    })
    c_dyn: float = 2.8e-10  # farad-equivalent
    leak_w_per_v: float = 0.0347

    def __post_init__(self):
        if self.frequency_hz <= 0 or self.voltage_v <= 0 or self.macs_per_cycle_peak <= 0:
            raise ValueError("machine rates must be positive")
        if any(v <= 0 for v in self.bytes_per_cycle.values()):
            raise ValueError("bytes_per_cycle must be positive")

    def power_w(self, voltage_v: float | None = None, frequency_hz: float | None = None) -> float:
        v = self.voltage_v if voltage_v is None else voltage_v
        f = self.frequency_hz if frequency_hz is None else frequency_hz
        return self.c_dyn * v * v * f + self.leak_w_per_v * v


# ---------------------------------------------------------------------------
# tile geometry


def _span(o0: int, o1: int, k: int, s: int, p: int, n: int) -> tuple[int, int, int, int]:
    """Input index range for outputs [o0, o1) of a strided window; returns clipped range and pads."""
    lo = o0 * s - p
    hi = (o1 - 1) * s - p + k
    return max(lo, 0), min(hi, n), max(0, -lo), max(0, hi - n)


def tile_for(g: GraphSpec, layer: LayerSpec, y0: int, y1: int, x0: int, x1: int,
             c0: int, c1: int) -> Tile:
    """Geometry, weight bytes and MACs of one output tile of ``layer``."""
    p = layer.params
    out = Region(c0, c1, y0, y1, x0, x1)
    th, tw, tc = y1 - y0, x1 - x0, c1 - c0
    if layer.kind == "conv":
        cin, h, w = g.shapes[layer.inputs[0]]
        (kh, kw), (sh, sw), (ph, pw) = p["kernel"], p["stride"], p["padding"]
        iy0, iy1, pt, pb = _span(y0, y1, kh, sh, ph, h)
        ix0, ix1, pl, pr = _span(x0, x1, kw, sw, pw, w)
        grp = p["groups"]
        cpg = cin // grp
        if grp == 1:
            ic0, ic1 = 0, cin
        else:  # depthwise: channel block of outputs maps 1:1 onto inputs
            ic0, ic1 = c0, c1
        region = Region(ic0, ic1, iy0, iy1, ix0, ix1, (pt, pb, pl, pr))
        wbytes = tc * cpg * kh * kw + BIAS_BYTES * tc
        return Tile(out, (region,), wbytes, kh * kw * cpg * tc * th * tw)
    if layer.kind == "maxpool":
        c, h, w = g.shapes[layer.inputs[0]]
        k, s, pad = p["kernel"], p["stride"], p.get("padding", 0)
        iy0, iy1, pt, pb = _span(y0, y1, k, s, pad, h)
        ix0, ix1, pl, pr = _span(x0, x1, k, s, pad, w)
        return Tile(out, (Region(c0, c1, iy0, iy1, ix0, ix1, (pt, pb, pl, pr)),), 0, 0)
    if layer.kind == "upsample":
        f = p["factor"]
        return Tile(out, (Region(c0, c1, y0 // f, (y1 - 1) // f + 1, x0 // f, (x1 - 1) // f + 1),), 0, 0)
    if layer.kind == "slice":
        a = p["start"]
        return Tile(out, (Region(a + c0, a + c1, y0, y1, x0, x1),), 0, 0)
    if layer.kind == "concat":
        regions = tuple(Region(0, g.shapes[s][0], y0, y1, x0, x1) for s in layer.inputs)
        return Tile(out, regions, 0, 0)
    if layer.kind == "add":
        return Tile(out, tuple(Region(c0, c1, y0, y1, x0, x1) for _ in layer.inputs), 0, 0)
    raise ValueError(f"cannot tile layer kind {layer.kind!r}")


def _partition(n: int, step: int) -> list[tuple[int, int]]:
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def _tiles(g: GraphSpec, layer: LayerSpec, th: int, tw: int, tc: int) -> list[Tile]:
    c, h, w = g.shapes[layer.name]
    return [tile_for(g, layer, y0, y1, x0, x1, c0, c1)
            for c0, c1 in _partition(c, tc)
            for y0, y1 in _partition(h, th)
            for x0, x1 in _partition(w, tw)]


def _channel_splittable(layer: LayerSpec) -> bool:
    if layer.kind != "conv":
        return False
    p = layer.params
    return p["groups"] == 1 or p["groups"] == p["in_channels"] == p["out_channels"]


def _max_fitting(lo: int, hi: int, fits) -> int:
    """Largest v in [lo, hi] with fits(v), assuming monotone; lo-1 if none."""
    if not fits(lo):
        return lo - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def working_set(g: GraphSpec, layer: LayerSpec, th: int, tw: int, tc: int, double_buffer: bool) -> int:
    """Largest resident L1 footprint over all tiles of a uniform (th, tw, tc) tiling.

    Tile geometry is separable (rows depend only on the row range, and so on),
    so the maximum is taken over the few distinct row/col/channel cases
    instead of every tile.
    """
    c, h, w = g.shapes[layer.name]
    rows = {(y1 - y0, tuple(r.y1 - r.y0 for r in tile_for(g, layer, y0, y1, 0, 1, 0, 1).inputs))
            for y0, y1 in _partition(h, th)}
    cols = {(x1 - x0, tuple(r.x1 - r.x0 for r in tile_for(g, layer, 0, 1, x0, x1, 0, 1).inputs))
            for x0, x1 in _partition(w, tw)}
    chans = set()
    for c0, c1 in _partition(c, tc):
        t = tile_for(g, layer, 0, 1, 0, 1, c0, c1)
        chans.add((c1 - c0, tuple(r.c1 - r.c0 for r in t.inputs), t.weight_bytes))
    io_factor = 2 if double_buffer else 1
    best = 0
    for oh, ih in rows:
        for ow, iw in cols:
            for oc, ic, wb in chans:
                io = oc * oh * ow + sum(a * b * d for a, b, d in zip(ic, ih, iw))
                best = max(best, io_factor * io + wb)
    return best


def _choose_tile(g: GraphSpec, layer: LayerSpec, l1: int, db: bool) -> tuple[int, int, int] | None:
    c, h, w = g.shapes[layer.name]
    fits = lambda th, tw, tc: working_set(g, layer, th, tw, tc, db) <= l1
    th = _max_fitting(1, h, lambda v: fits(v, w, c))
    if th >= 1:
        return th, w, c
    tw = _max_fitting(1, w, lambda v: fits(1, v, c))
    if tw >= 1:
        return 1, tw, c
    if _channel_splittable(layer):
        tc = _max_fitting(1, c, lambda v: fits(1, 1, v))
        if tc >= 1:
            return 1, 1, tc
    return None


def _plan_layer(g: GraphSpec, layer: LayerSpec, l1: int, double_buffer: bool) -> LayerSchedule:
    c, h, w = g.shapes[layer.name]
    choice, db = None, False
    if double_buffer:
        choice, db = _choose_tile(g, layer, l1, True), True
    if choice is None:
        choice, db = _choose_tile(g, layer, l1, False), False
    if choice is None:
        minimal = (1, 1, 1) if _channel_splittable(layer) else (1, 1, c)
        raise InfeasibleBudget(layer.name, working_set(g, layer, *minimal, False), l1)
    tiles = _tiles(g, layer, *choice)
    transfers: list[Transfer] = []
    prev_block = None
    for i, t in enumerate(tiles):
        for r in t.inputs:
            transfers.append(Transfer(r.nbytes, L2, L1, i))
        block = (t.out.c0, t.out.c1)
        if t.weight_bytes and block != prev_block:
            transfers.append(Transfer(t.weight_bytes, L2, L1, i))
        prev_block = block
        transfers.append(Transfer(t.out_bytes, L1, L2, i))
    return LayerSchedule(layer.name, layer.kind, tiles, transfers, db, choice)


def _layer_weight_bytes(g: GraphSpec, layer: LayerSpec) -> int:
    if layer.kind != "conv":
        return 0
    p = layer.params
    kh, kw = p["kernel"]
    return p["out_channels"] * (p["in_channels"] // p["groups"]) * kh * kw + BIAS_BYTES * p["out_channels"]


def _tensor_bytes(g: GraphSpec, name: str) -> int:
    return int(np.prod(g.shapes[name]))


def live_bytes(g: GraphSpec) -> dict[str, int]:
    """Bytes of activations alive while each layer executes (its inputs, its output, pending tensors)."""
    last_use = {l.name: i for i, l in enumerate(g.layers)}
    for i, l in enumerate(g.layers):
        for s in l.inputs:
            last_use[s] = max(last_use[s], i)
    for name in g.outputs:
        last_use[name] = len(g.layers)
    out = {}
    for i, l in enumerate(g.layers):
        out[l.name] = sum(_tensor_bytes(g, m.name) for j, m in enumerate(g.layers[:i + 1])
                          if last_use[m.name] >= i)
    return out


def plan_tiles(g: GraphSpec, budget: MemBudget, double_buffer: bool = True) -> TileSchedule:
    """Tile every layer to fit ``budget``; raises InfeasibleBudget naming the layer."""
    layers = g.layers[1:]
    weight_total = sum(_layer_weight_bytes(g, l) for l in layers)
    if weight_total > budget.l3_bytes:
        raise InfeasibleBudget("<weights>", weight_total, budget.l3_bytes, "l3")
    live = live_bytes(g)
    peak = max(live.values())
    if peak > budget.l3_bytes:
        raise InfeasibleBudget("<activations>", peak, budget.l3_bytes, "l3")
    resident = weight_total + peak <= budget.l2_bytes
    sched = TileSchedule(budget, weights_l2_resident=resident)
    for layer in layers:
        ls = _plan_layer(g, layer, budget.l1_bytes, double_buffer)
        wbytes = _layer_weight_bytes(g, layer)
        if wbytes > budget.l2_bytes:
            raise InfeasibleBudget(layer.name, wbytes, budget.l2_bytes, "l2")
        staged: list[Transfer] = []
        if not resident and wbytes:
            staged.append(Transfer(wbytes, L3, L2, -1))
        l2_free = budget.l2_bytes - (weight_total if resident else wbytes)
        if live[layer.name] > l2_free:
            ls.activations_in_l3 = True
            staged += [Transfer(_tensor_bytes(g, s), L3, L2, -1) for s in layer.inputs]
            staged.append(Transfer(_tensor_bytes(g, layer.name), L2, L3, -1))
        ls.transfers = staged + ls.transfers
        sched.layers[layer.name] = ls
    return sched


# ---------------------------------------------------------------------------
# validation, accounting, cycle model


def validate_schedule(g: GraphSpec, s: TileSchedule) -> None:
    """Independent re-check: budgets, exact output coverage, input availability."""
    for layer in g.layers[1:]:
        ls = s.layers[layer.name]
        c, h, w = g.shapes[layer.name]
        marks = np.zeros((c, h, w), dtype=np.int32)
        for t in ls.tiles:
            o = t.out
            marks[o.c0:o.c1, o.y0:o.y1, o.x0:o.x1] += 1
            need = t.resident_bytes(ls.double_buffer)
            if need > s.budget.l1_bytes:
                raise AssertionError(f"{layer.name}: tile needs {need} > l1 {s.budget.l1_bytes}")
            ref = tile_for(g, layer, o.y0, o.y1, o.x0, o.x1, o.c0, o.c1)
            for have, want in zip(t.inputs, ref.inputs):
                if not (have.c0 <= want.c0 and want.c1 <= have.c1 and have.y0 <= want.y0
                        and want.y1 <= have.y1 and have.x0 <= want.x0 and want.x1 <= have.x1):
                    raise AssertionError(f"{layer.name}: tile input region misses needed data")
        if not (marks == 1).all():
            raise AssertionError(f"{layer.name}: tiles do not partition the output exactly")
        tiles_fed = {tr.tile for tr in ls.transfers if tr.dst == L1}
        if tiles_fed != set(range(len(ls.tiles))) and layer.kind != "input":
            raise AssertionError(f"{layer.name}: some tiles receive no input transfer")


def simulate_transfers(s: TileSchedule) -> dict[tuple[str, str], int]:
    totals: dict[tuple[str, str], int] = {(L3, L2): 0, (L2, L1): 0, (L1, L2): 0, (L2, L3): 0}
    for ls in s.layers.values():
        for tr in ls.transfers:
            totals[(tr.src, tr.dst)] = totals.get((tr.src, tr.dst), 0) + tr.nbytes
    return totals


@dataclass
class CycleEstimate:
    total_cycles: int
    achieved_macs_per_cycle: float
    stall_cycles: int
    compute_cycles: int
    total_macs: int
    per_layer: dict[str, int]

    def latency_ms(self, frequency_hz: float) -> float:
        return self.total_cycles / frequency_hz * 1e3


def _xfer_cycles(tr: Transfer, m: MachineModel) -> int:
    return math.ceil(tr.nbytes / m.bytes_per_cycle[(tr.src, tr.dst)])


def estimate_cycles(s: TileSchedule, m: MachineModel) -> CycleEstimate:
    total = compute_total = macs_total = 0
    per_layer = {}
    for name, ls in s.layers.items():
        xfer = [0] * len(ls.tiles)
        layer_cycles = 0
        for tr in ls.transfers:
            cyc = _xfer_cycles(tr, m)
            if tr.tile < 0:
                layer_cycles += cyc
            else:
                xfer[tr.tile] += cyc
        for t, tx in zip(ls.tiles, xfer):
            comp = math.ceil(t.macs / m.macs_per_cycle_peak)
            compute_total += comp
            macs_total += t.macs
            layer_cycles += max(comp, tx) if ls.double_buffer else comp + tx
        per_layer[name] = layer_cycles
        total += layer_cycles
    achieved = macs_total / total if total else 0.0
    return CycleEstimate(total, achieved, total - compute_total, compute_total, macs_total, per_layer)


def format_schedule(g: GraphSpec, s: TileSchedule, m: MachineModel | None = None) -> str:
    b = s.budget
    lines = [f"budget     l1={b.l1_bytes} l2={b.l2_bytes} l3={b.l3_bytes}",
             f"weights    {'l2-resident' if s.weights_l2_resident else 'streamed from l3'}",
             f"tiles      {s.total_tiles}", ""]
    est = estimate_cycles(s, m) if m else None
    hdr = f"{'layer':<24} {'kind':<8} {'tiles':>6} {'tile rxcxc':<14} {'db':<3} {'l1 peak':>8} {'macs':>11}"
    lines.append(hdr + (f" {'cycles':>10}" if est else ""))
    for name, ls in s.layers.items():
        th, tw, tc = ls.tile_shape
        macs = sum(t.macs for t in ls.tiles)
        row = (f"{name:<24} {ls.kind:<8} {len(ls.tiles):>6} {f'{th}x{tw}x{tc}':<14} "
               f"{'y' if ls.double_buffer else 'n':<3} {ls.max_resident:>8} {macs:>11}")
        if est:
            row += f" {est.per_layer[name]:>10}"
        lines.append(row)
    lines.append("")
    for (src, dst), n in simulate_transfers(s).items():
        lines.append(f"transfer {src}->{dst:<4} {n:>12} bytes")
    if est:
        lines += ["",
                  f"machine    {m.frequency_hz / 1e6:g} MHz, {m.voltage_v:g} V, peak {m.macs_per_cycle_peak:g} MAC/cycle",
                  f"cycles     {est.total_cycles} (compute {est.compute_cycles}, stall {est.stall_cycles})",
                  f"latency    {est.latency_ms(m.frequency_hz):.3f} ms",
                  f"mac/cycle  {est.achieved_macs_per_cycle:.2f}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# tiled execution


def _crop(t: QuantTensor, r: Region, pad_value: int) -> QuantTensor:
    x = t.data[:, r.c0:r.c1, r.y0:r.y1, r.x0:r.x1]
    if any(r.pad):
        pt, pb, pl, pr = r.pad
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=pad_value)
    return QuantTensor(x, t.qparams)


def run_layer_tiled(layer: LayerSpec, inputs: list[QuantTensor], ws, ls: LayerSchedule) -> QuantTensor:
    """Execute one layer tile by tile; integer kernels make this bit-identical to untiled runs."""
    from .netzoo.execute import run_layer_q

    if layer.kind in ("concat", "add", "upsample", "slice") and len(ls.tiles) == 1:
        return run_layer_q(layer, inputs, ws)
    p = layer.params
    out_q = None
    full = None
    desc = ws.conv_desc(layer) if layer.kind == "conv" else None
    if layer.kind == "concat":
        out_q = ws.tensor_qparams[layer.name]
        inputs = [requantize(t, out_q) for t in inputs]
    for t in ls.tiles:
        o = t.out
        if layer.kind == "conv":
            x = _crop(inputs[0], t.inputs[0], inputs[0].qparams.zero_point)
            d = replace(desc.channel_block(o.c0, o.c1), padding=(0, 0))
            y = conv2d_q(x, d)
            if p["act"]:
                y = act_q(y, p["act"], ws.tensor_qparams[layer.name])
        elif layer.kind == "maxpool":
            x = _crop(inputs[0], t.inputs[0], INT8_MIN)
            y = maxpool2d(x, p["kernel"], p["stride"], 0)
        elif layer.kind == "upsample":
            f = p["factor"]
            r = t.inputs[0]
            y = upsample_nearest(_crop(inputs[0], r, 0), f)
            oy, ox = o.y0 - r.y0 * f, o.x0 - r.x0 * f
            y = QuantTensor(y.data[:, :, oy:oy + o.y1 - o.y0, ox:ox + o.x1 - o.x0], y.qparams)
        elif layer.kind == "slice":
            y = _crop(inputs[0], t.inputs[0], 0)
        elif layer.kind == "concat":
            y = concat_channels(*[_crop(x, r, 0) for x, r in zip(inputs, t.inputs)])
        elif layer.kind == "add":
            y = add_q(_crop(inputs[0], t.inputs[0], 0), _crop(inputs[1], t.inputs[1], 0),
                      ws.tensor_qparams[layer.name])
        else:
            raise ValueError(f"cannot execute layer kind {layer.kind!r}")
        if full is None:
            c = ls.tiles[-1].out.c1
            h = max(tt.out.y1 for tt in ls.tiles)
            w = max(tt.out.x1 for tt in ls.tiles)
            full = np.empty((1, c, h, w), dtype=np.int8)
            out_q = y.qparams
        full[:, o.c0:o.c1, o.y0:o.y1, o.x0:o.x1] = y.data
    return QuantTensor(full, out_q)
