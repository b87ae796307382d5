"""
Energy per stage, battery life and DVFS
=======================================

Stage table of the demonstrator, the resulting battery runtime, and a
voltage/frequency sweep of the inference stage with its Pareto frontier.
"""

from tyrt.netzoo import build_graph
from tyrt.planner import GAP9_BUDGET, MachineModel, estimate_cycles, plan_tiles
from tyrt.powermodel import DEFAULT_DVFS_GRID, dvfs_sweep, energy_report, format_energy_report, gap9_reference

p = gap9_reference()
print(format_energy_report(energy_report(p)))

# cycles of the v1.3 network from the planner's cycle model
g = build_graph("v1_3", "small")
cycles = estimate_cycles(plan_tiles(g, GAP9_BUDGET), MachineModel()).total_cycles

ops, front = dvfs_sweep(cycles, DEFAULT_DVFS_GRID, p.dvfs_c_dyn, p.dvfs_leak_w_per_v)
print(f"{cycles} cycles; {len(front)} of {len(ops)} operating points are Pareto-optimal")
for op in front:
    print(f"  {op.voltage_v:.2f} V {op.frequency_hz / 1e6:5.0f} MHz  "
          f"{op.latency_ms:6.2f} ms  {op.power_mw:6.2f} mW  {op.energy_mj:.3f} mJ")
