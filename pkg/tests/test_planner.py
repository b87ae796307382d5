import math

import numpy as np
import pytest

from tyrt.netzoo import forward
from tyrt.netzoo.execute import run_layer_q
from tyrt.netzoo.weights import init_weights
from tyrt.netzoo.graph import GraphSpec, LayerSpec
from tyrt.planner import (
    GAP9_BUDGET, L1, L2, L3, InfeasibleBudget, LayerSchedule, MachineModel, MemBudget, Region, Tile,
    TileSchedule, Transfer, estimate_cycles, format_schedule, plan_tiles, simulate_transfers,
    _tiles, run_layer_tiled, validate_schedule, working_set,
)
from tyrt.quantizer import ptq
from tyrt.tensor import quantize

from .toys import conv_layer

WEIGHTS_3X3_16 = 16 * 16 * 9 + 4 * 16  # int8 weights plus int32 bias
ROW_BYTES = 16 * 32  # one row of a 16-channel 32-wide int8 tensor
FULL_WORKING_SET = 2 * 16 * 32 * 32 + WEIGHTS_3X3_16  # 35136, single-buffered
FREE = {k: math.inf for k in [(L3, L2), (L2, L3), (L2, L1), (L1, L2)]}


def single_conv_graph(c=16, res=32, k=3, stride=1, groups=1):
    layers = [LayerSpec("input", "input", (), {"channels": c}),
              conv_layer("conv", "input", c, c, k=k, s=stride, act=None, groups=groups)]
    return GraphSpec("v8", "small", 1.0, 1.0, c - 4, res, layers, ["conv"], [stride])


def big_budget(l1):
    return MemBudget(l1, 1 << 24, 1 << 26)


def input_rows(ls):
    return [t.inputs[0].y1 - t.inputs[0].y0 for t in ls.tiles]


class TestHandExamples:
    def test_full_working_set_one_tile(self):
        g = single_conv_graph()
        ls = plan_tiles(g, big_budget(FULL_WORKING_SET), double_buffer=False).layers["conv"]
        assert len(ls.tiles) == 1
        assert ls.max_resident == FULL_WORKING_SET

    def test_one_tile_moves_everything_once(self):
        g = single_conv_graph()
        s = plan_tiles(g, big_budget(FULL_WORKING_SET), double_buffer=False)
        t = simulate_transfers(s)
        assert t[(L2, L1)] == 16 * 32 * 32 + WEIGHTS_3X3_16
        assert t[(L1, L2)] == 16 * 32 * 32
        assert t[(L3, L2)] == 0

    def test_half_working_set(self):
        # resident(th) = (th + 2) input rows + th output rows + weights; largest th with
        # 512 * (2 th + 2) + 2368 <= 17568 is 13, giving bands 13/13/6
        g = single_conv_graph()
        s = plan_tiles(g, big_budget(FULL_WORKING_SET // 2), double_buffer=False)
        ls = s.layers["conv"]
        assert ls.tile_shape == (13, 32, 16)
        assert [(t.out.y0, t.out.y1) for t in ls.tiles] == [(0, 13), (13, 26), (26, 32)]
        assert input_rows(ls) == [14, 15, 7]  # padded top, interior, padded bottom
        assert [tr.nbytes for tr in ls.transfers if tr.dst == L1] == [
            14 * ROW_BYTES, WEIGHTS_3X3_16, 15 * ROW_BYTES, 7 * ROW_BYTES]  # weights fetched once
        assert len([tr for tr in ls.transfers if tr.dst == L2]) == 3
        totals = simulate_transfers(s)
        assert totals[(L2, L1)] == 36 * ROW_BYTES + WEIGHTS_3X3_16
        assert 36 * ROW_BYTES > 16 * 32 * 32  # halo rows re-fetched

    def test_two_tiles_share_two_row_halo(self):
        g = single_conv_graph()
        l1 = ROW_BYTES * (17 + 16) + WEIGHTS_3X3_16
        ls = plan_tiles(g, big_budget(l1), double_buffer=False).layers["conv"]
        assert len(ls.tiles) == 2
        assert input_rows(ls) == [17, 17]
        assert sum(t.in_bytes for t in ls.tiles) - 16 * 32 * 32 == 2 * ROW_BYTES

    def test_double_buffer_halves_band(self):
        g = single_conv_graph()
        ls = plan_tiles(g, big_budget(FULL_WORKING_SET), double_buffer=True).layers["conv"]
        assert ls.double_buffer
        th = ls.tile_shape[0]
        # largest th with 2 * 512 * (2 th + 2) + 2368 <= 35136
        assert th == 15
        assert ls.max_resident <= FULL_WORKING_SET

    def test_single_buffer_fallback(self):
        g = single_conv_graph()
        # one output pixel of one channel: 3x3x16 input, 1 output byte, 3x3x16 weights + bias
        single, double = 144 + 1 + 148, 2 * (144 + 1) + 148
        ls = plan_tiles(g, big_budget(single), double_buffer=True).layers["conv"]
        assert not ls.double_buffer and ls.tile_shape == (1, 1, 1)
        ls = plan_tiles(g, big_budget(double), double_buffer=True).layers["conv"]
        assert ls.double_buffer and ls.tile_shape == (1, 1, 1)

    def test_working_set_matches_tile_enumeration(self, v10_big):
        g, _, _ = v10_big
        for layer in g.layers[1:]:
            c, h, w = g.shapes[layer.name]
            for th, tw, tc in [(h, w, c), (3, w, c), (1, 5, c), (1, 1, max(1, c // 3))]:
                if tc != c and layer.kind != "conv":
                    continue
                tiles = _tiles(g, layer, th, tw, tc)
                for db in (False, True):
                    assert working_set(g, layer, th, tw, tc, db) == max(t.resident_bytes(db) for t in tiles)

    def test_width_then_channel_growth(self):
        g = single_conv_graph()
        row = working_set(g, g["conv"], 1, 32, 16, False)
        ls = plan_tiles(g, big_budget(row - 1), double_buffer=False).layers["conv"]
        assert ls.tile_shape[0] == 1 and ls.tile_shape[1] < 32 and ls.tile_shape[2] == 16
        pix = working_set(g, g["conv"], 1, 1, 16, False)
        ls = plan_tiles(g, big_budget(pix - 1), double_buffer=False).layers["conv"]
        assert ls.tile_shape[:2] == (1, 1) and ls.tile_shape[2] < 16
        # channel blocks are the outer loop, so each block's weights are fetched exactly once
        fetched = sum(tr.nbytes for tr in ls.transfers if tr.dst == L1)
        assert fetched == sum(t.in_bytes for t in ls.tiles) + WEIGHTS_3X3_16

    def test_infeasible_names_layer(self):
        g = single_conv_graph()
        with pytest.raises(InfeasibleBudget, match="'conv'") as e:
            plan_tiles(g, big_budget(64))
        assert e.value.layer == "conv" and e.value.need > 64


def exhaustive_band(g, layer, l1):
    """Tallest full-width band whose every tile fits, by explicit row arithmetic."""
    cin, h, w = g.shapes[layer.inputs[0]]
    c = g.shapes[layer.name][0]
    (k, _), (s, _), (p, _) = layer.params["kernel"], layer.params["stride"], layer.params["padding"]
    wbytes = c * cin * k * k + 4 * c
    best = 0
    for th in range(1, g.shapes[layer.name][1] + 1):
        worst = 0
        for y0 in range(0, g.shapes[layer.name][1], th):
            y1 = min(y0 + th, g.shapes[layer.name][1])
            rows = {y * s - p + ky for y in range(y0, y1) for ky in range(k)} & set(range(h))
            worst = max(worst, cin * w * len(rows) + c * g.shapes[layer.name][2] * (y1 - y0) + wbytes)
        if worst <= l1:
            best = th
    return best


@pytest.mark.parametrize("k,stride,res", [(3, 1, 8), (3, 2, 8), (1, 1, 8), (3, 1, 12)])
def test_greedy_matches_exhaustive_band(k, stride, res):
    g = single_conv_graph(c=8, res=res, k=k, stride=stride)
    layer = g["conv"]
    for l1 in range(400, 2400, 37):
        want = exhaustive_band(g, layer, l1)
        try:
            ls = plan_tiles(g, big_budget(l1), double_buffer=False).layers["conv"]
        except InfeasibleBudget:
            assert want == 0
            continue
        if want:
            assert ls.tile_shape[0] == want and ls.tile_shape[1] == g.shapes["conv"][2]
        else:
            assert ls.tile_shape[0] == 1


class TestValidator:
    def test_valid_schedules_pass(self, quantized_nets):
        for g, _, _ in quantized_nets.values():
            for l1 in (128 * 1024, 16 * 1024):
                validate_schedule(g, plan_tiles(g, MemBudget(l1, GAP9_BUDGET.l2_bytes, GAP9_BUDGET.l3_bytes)))

    def test_detects_missing_tile(self):
        g = single_conv_graph()
        s = plan_tiles(g, big_budget(FULL_WORKING_SET // 2), double_buffer=False)
        s.layers["conv"].tiles.pop()
        with pytest.raises(AssertionError, match="partition"):
            validate_schedule(g, s)

    def test_detects_budget_violation(self):
        g = single_conv_graph()
        s = plan_tiles(g, big_budget(FULL_WORKING_SET), double_buffer=False)
        s.budget = big_budget(1000)
        with pytest.raises(AssertionError, match="l1"):
            validate_schedule(g, s)

    def test_detects_short_input_region(self):
        g = single_conv_graph()
        s = plan_tiles(g, big_budget(FULL_WORKING_SET // 2), double_buffer=False)
        ls = s.layers["conv"]
        t = ls.tiles[1]
        r = t.inputs[0]
        ls.tiles[1] = Tile(t.out, (Region(r.c0, r.c1, r.y0 + 1, r.y1, r.x0, r.x1, r.pad),), t.weight_bytes, t.macs)
        with pytest.raises(AssertionError, match="misses"):
            validate_schedule(g, s)


class TestMemBudget:
    @pytest.mark.parametrize("b", [(0, 1, 2), (4, 2, 8), (1, 4, 2)])
    def test_invalid(self, b):
        with pytest.raises(ValueError):
            MemBudget(*b)

    def test_weights_stream_from_l3_when_l2_small(self, v8_small):
        g, _, _ = v8_small
        s = plan_tiles(g, MemBudget(32 * 1024, 256 * 1024, 8 << 20))
        assert not s.weights_l2_resident
        assert simulate_transfers(s)[(L3, L2)] > 0
        assert plan_tiles(g, GAP9_BUDGET).weights_l2_resident


class TestCycles:
    def _one_tile(self):
        g = single_conv_graph()
        return plan_tiles(g, big_budget(FULL_WORKING_SET), double_buffer=False)

    def test_free_transfers_reach_peak(self):
        est = estimate_cycles(self._one_tile(), MachineModel(bytes_per_cycle=FREE))
        assert est.achieved_macs_per_cycle == 48.0 and est.stall_cycles == 0
        assert est.total_macs == 16 * 16 * 9 * 32 * 32

    def test_transfer_bound_gives_half_peak(self):
        n = 10
        tiles = [Tile(Region(0, 1, i, i + 1, 0, 1), (), 0, 96) for i in range(n)]
        transfers = [Transfer(4, L2, L1, i) for i in range(n)]  # 4 cycles vs 2 compute cycles
        s = TileSchedule(big_budget(1 << 10), {"x": LayerSchedule("x", "conv", tiles, transfers, True, (1, 1, 1))})
        m = MachineModel(bytes_per_cycle={**FREE, (L2, L1): 1.0})
        assert estimate_cycles(s, m).achieved_macs_per_cycle == 24.0
        s.layers["x"].double_buffer = False
        assert estimate_cycles(s, m).total_cycles == n * 6

    def test_closed_form_single_tile(self):
        s = self._one_tile()
        m = MachineModel()
        t = simulate_transfers(s)
        compute = math.ceil(16 * 16 * 9 * 32 * 32 / 48)
        xfer = math.ceil(16384 / 8) + math.ceil(WEIGHTS_3X3_16 / 8) + math.ceil(t[(L1, L2)] / 8)
        assert estimate_cycles(s, m).total_cycles == compute + xfer

    def test_achieved_never_exceeds_peak(self, quantized_nets):
        for g, _, _ in quantized_nets.values():
            for l1 in (4096, 32 * 1024, 128 * 1024):
                est = estimate_cycles(plan_tiles(g, MemBudget(l1, 1536 * 1024, 8 << 20)), MachineModel())
                assert est.achieved_macs_per_cycle <= 48.0

    def test_monotone_in_l1(self, quantized_nets):
        m = MachineModel()
        for g, _, _ in quantized_nets.values():
            prev = None
            for l1 in (256 * 1024, 128 * 1024, 64 * 1024, 32 * 1024, 16 * 1024, 8 * 1024, 4096):
                s = plan_tiles(g, MemBudget(l1, 1536 * 1024, 8 << 20))
                eff = estimate_cycles(s, m).achieved_macs_per_cycle
                moved = sum(simulate_transfers(s).values())
                if prev:
                    assert eff <= prev[0] + 1e-12 and moved >= prev[1]
                prev = (eff, moved)

    def test_transfer_totals_are_bookkeeping_identity(self, v10_big):
        g, _, _ = v10_big
        s = plan_tiles(g, MemBudget(16 * 1024, 512 * 1024, 8 << 20))
        totals = simulate_transfers(s)
        assert sum(totals.values()) == sum(tr.nbytes for ls in s.layers.values() for tr in ls.transfers)


def test_tiled_forward_bit_exact(quantized_nets):
    for g, ws, images in quantized_nets.values():
        x = quantize(images[0], ws.tensor_qparams["input"])
        ref = forward(g, ws, x)
        s = plan_tiles(g, MemBudget(8 * 1024, 1536 * 1024, 8 << 20))
        assert all(a == b for a, b in zip(ref, forward(g, ws, x, s)))


def test_tiled_depthwise_channel_blocks():
    g = single_conv_graph(c=16, res=16, groups=16)
    rng = np.random.default_rng(0)
    x = rng.random((1, 16, 16, 16))
    ws = ptq(g, init_weights(g), [x])
    xq = quantize(x, ws.tensor_qparams["input"])
    ref = run_layer_q(g["conv"], [xq], ws)
    pix = working_set(g, g["conv"], 1, 1, 16, False)
    ls = plan_tiles(g, big_budget(pix - 1), double_buffer=False).layers["conv"]
    assert ls.tile_shape[2] < 16
    assert run_layer_tiled(g["conv"], [xq], ws, ls) == ref


def test_format_schedule(v13_small):
    g, _, _ = v13_small
    text = format_schedule(g, plan_tiles(g, GAP9_BUDGET), MachineModel())
    assert "mac/cycle" in text and all(l.name in text for l in g.layers[1:])
