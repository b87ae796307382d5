"""Stage-level energy bookkeeping, DVFS sweeps with Pareto extraction, battery runtime."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

STAGES = ("init", "capture", "demosaic", "inference", "postprocess", "quiescent")


def stage_energy(current_ma: float, voltage_v: float, time_ms: float) -> float:
    """mA * V = mW; mW * ms = uJ; returned in mJ."""
    return current_ma * voltage_v * time_ms / 1000.0


@dataclass(frozen=True)
class StageReport:
    stage: str
    time_ms: float
    current_ma: float
    voltage_v: float

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.time_ms < 0 or self.current_ma < 0 or self.voltage_v < 0:
            raise ValueError(f"{self.stage}: negative time, current or voltage")

    @property
    def power_mw(self) -> float:
        return self.current_ma * self.voltage_v

    @property
    def energy_mj(self) -> float:
        return stage_energy(self.current_ma, self.voltage_v, self.time_ms)

    def as_dict(self) -> dict:
        return {"stage": self.stage, "time_ms": self.time_ms, "current_ma": self.current_ma,
                "voltage_v": self.voltage_v, "power_mw": self.power_mw, "energy_mj": self.energy_mj}


@dataclass(frozen=True)
class LoopSummary:
    total_time_ms: float
    avg_power_mw: float
    loop_energy_mj: float
    fps: float


def loop_summary(stages: Sequence[StageReport]) -> LoopSummary:
    if not stages:
        raise ValueError("loop needs at least one stage")
    t = sum(s.time_ms for s in stages)
    e = sum(s.energy_mj for s in stages)
    if t <= 0:
        raise ValueError("loop time must be positive")
    return LoopSummary(t, e / t * 1000.0, e, 1000.0 / t)


def battery_runtime(capacity_mah: float, nominal_v: float, system_power_mw: float) -> float:
    """Hours of operation: stored mWh over drawn mW."""
    if capacity_mah <= 0 or nominal_v <= 0 or system_power_mw <= 0:
        raise ValueError("battery_runtime needs positive inputs")
    return capacity_mah * nominal_v / system_power_mw


# ---------------------------------------------------------------------------
# DVFS


@dataclass(frozen=True)
class OperatingPoint:
    voltage_v: float
    frequency_hz: float
    latency_ms: float
    power_mw: float
    energy_mj: float


def operating_point(cycles: int, voltage_v: float, frequency_hz: float,
                    c_dyn: float, leak_w_per_v: float) -> OperatingPoint:
    if voltage_v <= 0 or frequency_hz <= 0:
        raise ValueError("voltage and frequency must be positive")
    latency_s = cycles / frequency_hz
    power_w = c_dyn * voltage_v ** 2 * frequency_hz + leak_w_per_v * voltage_v
    return OperatingPoint(voltage_v, frequency_hz, latency_s * 1e3, power_w * 1e3, power_w * latency_s * 1e3)


def pareto_frontier(points: Sequence[OperatingPoint]) -> list[OperatingPoint]:
    """Points not dominated in (latency, energy), ordered by latency.

    Exact duplicates do not dominate each other, so both are kept.
    """
    ordered = sorted(points, key=lambda p: (p.latency_ms, p.energy_mj))
    front: list[OperatingPoint] = []
    for p in ordered:
        if not front or p.energy_mj < front[-1].energy_mj:
            front.append(p)
        elif (p.latency_ms, p.energy_mj) == (front[-1].latency_ms, front[-1].energy_mj):
            front.append(p)
    return front


def dvfs_sweep(cycles: int, points: Sequence[tuple[float, float]], c_dyn: float,
               leak_w_per_v: float) -> tuple[list[OperatingPoint], list[OperatingPoint]]:
    """Evaluate (voltage, frequency) pairs for a network of ``cycles`` cycles."""
    if not points:
        raise ValueError("dvfs_sweep needs at least one operating point")
    ops = [operating_point(cycles, v, f, c_dyn, leak_w_per_v) for v, f in points]
    return ops, pareto_frontier(ops)


# voltage/frequency pairs in the range the accelerator supports (150-370 MHz)
DEFAULT_DVFS_GRID = tuple(
    (v, f * 1e6)
    for v, fmax in ((0.65, 240), (0.70, 280), (0.75, 330), (0.80, 370))
    for f in range(150, fmax + 1, 10)
)


# ---------------------------------------------------------------------------
# profiles


@dataclass
class PowerProfile:
    name: str
    stages: dict[str, StageReport]
    loop: tuple[str, ...] = ("capture", "demosaic", "inference", "postprocess")
    declared: dict[str, float] = field(default_factory=dict)  # loop totals as measured, if known
    system_adder_mw: float = 0.0  # everything outside the SoC (radio, sensor), constant
    battery_capacity_mah: float = 154.0
    battery_voltage_v: float = 3.8
    dvfs_c_dyn: float = 2.8e-10
    dvfs_leak_w_per_v: float = 0.0347
    dvfs_voltage_v: float = 0.8
    dvfs_frequency_hz: float = 370e6
    macs_per_cycle_peak: float = 48.0

    def loop_stages(self) -> list[StageReport]:
        return [self.stages[s] for s in self.loop]

    def with_stage(self, stage: StageReport) -> "PowerProfile":
        stages = dict(self.stages)
        stages[stage.stage] = stage
        return PowerProfile(**{**self.__dict__, "stages": stages})

    def system_power_mw(self, use_declared: bool = True) -> float:
        soc = self.declared.get("loop_power_mw") if use_declared else None
        if soc is None:
            soc = loop_summary(self.loop_stages()).avg_power_mw
        return soc + self.system_adder_mw


def gap9_reference() -> PowerProfile:
    """Stage measurements of the GAP9 demonstrator running the v1.3 network.

    The post-processing time is 27 us; a 0.03 ms entry would overstate its
    energy by 10%.
    """
    rail = 1.8
    stages = {
        "init": StageReport("init", 41.44, 11.96, rail),
        "capture": StageReport("capture", 34.69, 18.78, rail),
        "demosaic": StageReport("demosaic", 4.87, 23.82, rail),
        "inference": StageReport("inference", 16.86, 52.27, rail),
        "postprocess": StageReport("postprocess", 0.027, 28.26, rail),
        "quiescent": StageReport("quiescent", 1000.0, 0.75, 3.3),
    }
    return PowerProfile(
        "paper-gap9", stages,
        declared={"loop_time_ms": 56.45, "loop_energy_mj": 3.05, "loop_current_ma": 30.0,
                  "loop_power_mw": 54.0},
        system_adder_mw=8.9,
    )


PROFILES = {"paper-gap9": gap9_reference}

_SCALARS = ("system_adder_mw", "battery_capacity_mah", "battery_voltage_v", "dvfs_c_dyn",
            "dvfs_leak_w_per_v", "dvfs_voltage_v", "dvfs_frequency_hz", "macs_per_cycle_peak")


def format_profile(p: PowerProfile) -> str:
    lines = [f"name = {p.name}", f"loop = {','.join(p.loop)}"]
    for s in p.stages.values():
        lines += [f"stage.{s.stage}.time_ms = {s.time_ms!r}",
                  f"stage.{s.stage}.current_ma = {s.current_ma!r}",
                  f"stage.{s.stage}.voltage_v = {s.voltage_v!r}"]
    lines += [f"declared.{k} = {v!r}" for k, v in p.declared.items()]
    lines += [f"{k} = {getattr(p, k)!r}" for k in _SCALARS]
    return "\n".join(lines) + "\n"


def parse_profile(text: str) -> PowerProfile:
    """key = value lines; '#' starts a comment. Unknown keys are errors."""
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {n}: expected key = value")
        raw[key.strip()] = value.strip()
    stage_fields: dict[str, dict[str, float]] = {}
    declared: dict[str, float] = {}
    kwargs: dict = {}
    for key, value in raw.items():
        parts = key.split(".")
        if key == "name":
            kwargs["name"] = value
        elif key == "loop":
            kwargs["loop"] = tuple(v.strip() for v in value.split(","))
        elif parts[0] == "stage" and len(parts) == 3:
            stage_fields.setdefault(parts[1], {})[parts[2]] = float(value)
        elif parts[0] == "declared" and len(parts) == 2:
            declared[parts[1]] = float(value)
        elif key in _SCALARS:
            kwargs[key] = float(value)
        else:
            raise ValueError(f"unknown profile key {key!r}")
    stages = {}
    for name, f in stage_fields.items():
        try:
            stages[name] = StageReport(name, f["time_ms"], f["current_ma"], f["voltage_v"])
        except KeyError as e:
            raise ValueError(f"stage {name!r} is missing {e.args[0]}") from None
    p = PowerProfile(kwargs.pop("name", "custom"), stages, declared=declared, **kwargs)
    missing = [s for s in p.loop if s not in stages]
    if missing:
        raise ValueError(f"loop references undefined stages {missing}")
    return p


def load_profile(name_or_path: str) -> PowerProfile:
    if name_or_path in PROFILES:
        return PROFILES[name_or_path]()
    path = Path(name_or_path)
    if not path.is_file():
        raise ValueError(f"no built-in profile or file named {name_or_path!r}")
    return parse_profile(path.read_text())


# ---------------------------------------------------------------------------
# reports


@dataclass
class EnergyReport:
    profile: str
    stages: list[dict]
    loop: dict
    declared: dict
    system_power_mw: float
    battery_runtime_h: float
    battery_runtime_soc_only_h: float


def energy_report(p: PowerProfile) -> EnergyReport:
    s = loop_summary(p.loop_stages())
    soc_mw = p.declared.get("loop_power_mw", s.avg_power_mw)
    return EnergyReport(
        p.name,
        [st.as_dict() for st in p.stages.values()],
        asdict(s),
        dict(p.declared),
        p.system_power_mw(),
        battery_runtime(p.battery_capacity_mah, p.battery_voltage_v, p.system_power_mw()),
        battery_runtime(p.battery_capacity_mah, p.battery_voltage_v, soc_mw),
    )


def format_energy_report(r: EnergyReport) -> str:
    lines = [f"profile {r.profile}", "",
             f"{'stage':<12} {'time ms':>10} {'current mA':>11} {'volt V':>7} {'power mW':>9} {'energy mJ':>10}"]
    for s in r.stages:
        lines.append(f"{s['stage']:<12} {s['time_ms']:>10.3f} {s['current_ma']:>11.2f} {s['voltage_v']:>7.2f} "
                     f"{s['power_mw']:>9.2f} {s['energy_mj']:>10.4f}")
    lp = r.loop
    lines += ["",
              f"loop (sum of stages)  time {lp['total_time_ms']:.3f} ms  energy {lp['loop_energy_mj']:.3f} mJ  "
              f"avg power {lp['avg_power_mw']:.2f} mW  {lp['fps']:.2f} fps"]
    if r.declared:
        d = r.declared
        lines.append("loop (declared)       " + "  ".join(f"{k} {v:g}" for k, v in d.items()))
        if "loop_energy_mj" in d and lp["loop_energy_mj"] > 0:
            gap = (d["loop_energy_mj"] - lp["loop_energy_mj"]) / d["loop_energy_mj"] * 100
            lines.append(f"declared vs summed loop energy: {gap:+.1f}%")
    lines += [f"system power          {r.system_power_mw:.2f} mW",
              f"battery runtime       {r.battery_runtime_h:.2f} h (SoC only: {r.battery_runtime_soc_only_h:.2f} h)"]
    return "\n".join(lines) + "\n"


def format_sweep(ops: Sequence[OperatingPoint], front: Sequence[OperatingPoint]) -> str:
    """CSV-style table, one row per point, frontier membership flagged."""
    on_front = {id(p) for p in front}
    rows = ["voltage_v,frequency_mhz,latency_ms,power_mw,energy_mj,pareto"]
    for p in sorted(ops, key=lambda p: (p.voltage_v, p.frequency_hz)):
        rows.append(f"{p.voltage_v:.3f},{p.frequency_hz / 1e6:.1f},{p.latency_ms:.4f},"
                    f"{p.power_mw:.3f},{p.energy_mj:.5f},{int(id(p) in on_front)}")
    return "\n".join(rows) + "\n"


def dump_json(obj, path) -> Path:
    path = Path(path)
    data = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path
