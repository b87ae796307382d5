"""
Tiling under memory budgets
===========================

Plan the v1.3 network for shrinking L1 sizes and watch the modeled
MAC/cycle fall while data movement grows. The tiled int8 forward pass stays
bit-identical to the untiled one.
"""

import numpy as np

from tyrt.netzoo import build_graph, forward, init_weights
from tyrt.planner import GAP9_BUDGET, MachineModel, MemBudget, estimate_cycles, plan_tiles, simulate_transfers
from tyrt.quantizer import ptq
from tyrt.tensor import quantize

g = build_graph("v1_3", "small", input_resolution=256)
m = MachineModel()

print(f"{'l1 kB':>6} {'tiles':>7} {'MAC/cycle':>10} {'latency ms':>11} {'l2->l1 kB':>10}")
for kb in (256, 128, 64, 32, 16, 8):
    s = plan_tiles(g, MemBudget(kb * 1024, GAP9_BUDGET.l2_bytes, GAP9_BUDGET.l3_bytes))
    est = estimate_cycles(s, m)
    moved = simulate_transfers(s)[("l2", "l1")] / 1024
    print(f"{kb:>6} {s.total_tiles:>7} {est.achieved_macs_per_cycle:>10.2f} "
          f"{est.latency_ms(m.frequency_hz):>11.2f} {moved:>10.0f}")

# tiling must not change a single output code
g = build_graph("v1_3", "small", input_resolution=128)
rng = np.random.default_rng(0)
images = [rng.random((1, 3, 128, 128))]
ws = ptq(g, init_weights(g), images)
x = quantize(images[0], ws.tensor_qparams["input"])
tiled = forward(g, ws, x, plan_tiles(g, MemBudget(8 * 1024, 1 << 21, 1 << 23)))
print("bit-identical:", all(a == b for a, b in zip(forward(g, ws, x), tiled)))
