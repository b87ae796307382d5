"""End-to-end demonstrator loop: capture, demosaic, inference, post-processing, reporting."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .detect import GridMeta, format_records, postprocess
from .netzoo import fileformat
from .netzoo.execute import forward
from .netzoo.graph import GraphError, GraphSpec
from .netzoo.weights import WeightStore
from .planner import MachineModel, MemBudget, TileSchedule, estimate_cycles, plan_tiles
from .powermodel import PowerProfile, StageReport, load_profile, loop_summary


class ModelError(ValueError):
    pass


class SourceError(ValueError):
    pass


@dataclass
class RunConfig:
    model: Path
    out_dir: Path
    source: str = "synthetic"  # "synthetic" or a directory of PGM frames
    frames: int = 10
    frame_width: int = 320
    frame_height: int = 320
    pattern: str = "RGGB"
    budget: MemBudget = field(default_factory=lambda: MemBudget(128 * 1024, 1536 * 1024, 8 << 20))
    double_buffer: bool = True
    profile: str = "paper-gap9"
    timing: str = "profile"  # inference stage time: "profile" (measured) or "model" (planner cycles)
    conf_threshold: float = 0.25
    iou_threshold: float = 0.45
    resize: str = "nearest"
    seed: int = 0
    wallclock: bool = False
    write_images: bool = True

    def __post_init__(self):
        self.model, self.out_dir = Path(self.model), Path(self.out_dir)
        if self.timing not in ("profile", "model"):
            raise ValueError(f"timing must be 'profile' or 'model', not {self.timing!r}")
        if self.frames < 0:
            raise ValueError("frame count must be non-negative")
        if not 0.0 <= self.conf_threshold <= 1.0 or not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("thresholds must be in [0, 1]")


def machine_from_profile(p: PowerProfile) -> MachineModel:
    return MachineModel(frequency_hz=p.dvfs_frequency_hz, voltage_v=p.dvfs_voltage_v,
                        macs_per_cycle_peak=p.macs_per_cycle_peak, c_dyn=p.dvfs_c_dyn,
                        leak_w_per_v=p.dvfs_leak_w_per_v)


def load_quantized(path) -> tuple[GraphSpec, WeightStore]:
    try:
        g, ws = fileformat.load(path)
    except FileNotFoundError:
        raise ModelError(f"model file {path} not found") from None
    except (fileformat.FormatError, GraphError) as e:
        raise ModelError(f"{path}: {e}") from None
    if not ws.is_quantized:
        raise ModelError(f"{path} has no int8 weights; run `quantize` first")
    return g, ws


@dataclass
class InferenceModel:
    cycles: int
    macs: int
    macs_per_cycle: float
    latency_ms: float
    power_mw: float
    tiles: int
    weights_l2_resident: bool


@dataclass
class PipelineReport:
    model: str
    profile: str
    timing: str
    frames: int
    detections: int
    stages: list[dict]
    loop_sequential: dict  # stages back to back, one frame per sum of stage times
    loop_period_ms: float  # capture overlapped with processing
    fps_double_buffered: float
    virtual_end_ms: float
    inference: dict
    wallclock_s: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def format_report(r: PipelineReport) -> str:
    ls = r.loop_sequential
    inf = r.inference
    lines = [
        f"model       {r.model}",
        f"profile     {r.profile} (inference timing: {r.timing})",
        f"frames      {r.frames}",
        f"detections  {r.detections}",
        "",
        f"{'stage':<12} {'time ms':>10} {'current mA':>11} {'power mW':>9} {'energy mJ':>10}",
    ]
    for s in r.stages:
        lines.append(f"{s['stage']:<12} {s['time_ms']:>10.3f} {s['current_ma']:>11.2f} "
                     f"{s['power_mw']:>9.2f} {s['energy_mj']:>10.4f}")
    lines += [
        "",
        f"loop, sequential stages   {ls['total_time_ms']:.3f} ms  {ls['fps']:.2f} fps  "
        f"{ls['avg_power_mw']:.2f} mW  {ls['loop_energy_mj']:.3f} mJ/frame",
        f"loop, double-buffered     {r.loop_period_ms:.3f} ms  {r.fps_double_buffered:.2f} fps",
        f"virtual time at end       {r.virtual_end_ms:.3f} ms",
        "",
        f"inference model  {inf['cycles']} cycles, {inf['macs']} MACs, {inf['macs_per_cycle']:.2f} MAC/cycle, "
        f"{inf['latency_ms']:.3f} ms, {inf['tiles']} tiles",
    ]
    if r.wallclock_s is not None:
        lines.append(f"host wall-clock  {r.wallclock_s:.3f} s (host timing, not a modeled quantity)")
    return "\n".join(lines) + "\n"


def _producer(cfg: RunConfig, scenes: list):
    if cfg.source == "synthetic":
        return imaging.synthetic_producer(cfg.seed, cfg.frames, cfg.frame_width, cfg.frame_height,
                                          cfg.pattern, scenes=scenes)
    path = Path(cfg.source)
    if not path.is_dir():
        raise SourceError(f"source directory {path} does not exist")
    return imaging.directory_producer(path, cfg.pattern)


def inference_model(g: GraphSpec, schedule: TileSchedule, m: MachineModel) -> InferenceModel:
    est = estimate_cycles(schedule, m)
    return InferenceModel(est.total_cycles, est.total_macs, est.achieved_macs_per_cycle,
                          est.latency_ms(m.frequency_hz), m.power_w() * 1e3, schedule.total_tiles,
                          schedule.weights_l2_resident)


def run_pipeline(cfg: RunConfig) -> PipelineReport:
    """Run the loop over every frame of the source and write outputs under ``cfg.out_dir``."""
    t0 = time.perf_counter()
    g, ws = load_quantized(cfg.model)
    profile = load_profile(cfg.profile)
    machine = machine_from_profile(profile)
    schedule = plan_tiles(g, cfg.budget, cfg.double_buffer)
    inf = inference_model(g, schedule, machine)

    stages = {s: profile.stages[s] for s in ("capture", "demosaic", "inference", "postprocess")}
    if cfg.timing == "model":
        rail = stages["inference"].voltage_v
        stages["inference"] = StageReport("inference", inf.latency_ms, inf.power_mw / rail, rail)
    loop = loop_summary(list(stages.values()))
    processing_ms = sum(stages[s].time_ms for s in ("demosaic", "inference", "postprocess"))

    det_dir = cfg.out_dir / "detections"
    img_dir = cfg.out_dir / "annotated"
    det_dir.mkdir(parents=True, exist_ok=True)
    if cfg.write_images:
        img_dir.mkdir(parents=True, exist_ok=True)

    scenes: list = []
    source = imaging.FrameSource(_producer(cfg, scenes), stages["capture"].time_ms)
    meta = GridMeta.from_graph(g)
    in_q = ws.tensor_qparams[g.input_name]
    n_frames = n_dets = 0
    gt_lines = []
    try:
        for i, frame in enumerate(source):
            rgb = imaging.demosaic_bilinear(frame)
            x = imaging.to_net_input(rgb, g.input_resolution, in_q, cfg.resize)
            dets = postprocess(forward(g, ws, x, schedule), meta, cfg.conf_threshold, cfg.iou_threshold)
            sx, sy = frame.width / g.input_resolution, frame.height / g.input_resolution
            objs = [type(d)(d.class_id, d.score, (d.box[0] * sx, d.box[1] * sy, d.box[2] * sx, d.box[3] * sy))
                    for d in dets]
            frame_id = f"frame_{i:04d}"
            (det_dir / f"{frame_id}.txt").write_text(format_records(frame_id, objs, with_score=True))
            if cfg.write_images:
                imaging.write_ppm(img_dir / f"{frame_id}.ppm",
                                  imaging.draw_boxes(rgb, [(d.class_id, d.box) for d in objs]))
            if scenes:
                gt_lines.append(format_records(frame_id, scenes[i].objects, with_score=False))
            n_frames += 1
            n_dets += len(objs)
            source.advance(processing_ms)
    except imaging.ImageError as e:
        raise SourceError(str(e)) from None
    if gt_lines:
        (cfg.out_dir / "ground_truth.txt").write_text("".join(gt_lines))

    period = imaging.loop_period(stages["capture"].time_ms, processing_ms)
    report = PipelineReport(
        model=cfg.model.name, profile=profile.name, timing=cfg.timing, frames=n_frames,
        detections=n_dets, stages=[s.as_dict() for s in stages.values()], loop_sequential=asdict(loop),
        loop_period_ms=period, fps_double_buffered=1000.0 / period, virtual_end_ms=source.clock_ms,
        inference=asdict(inf),
        wallclock_s=round(time.perf_counter() - t0, 3) if cfg.wallclock else None,
    )
    (cfg.out_dir / "report.txt").write_text(format_report(report))
    (cfg.out_dir / "report.json").write_text(report.to_json())
    return report


def calibration_images(g: GraphSpec, count: int, seed: int, source: str = "synthetic",
                       pattern: str = "RGGB", width: int = 320, height: int = 320) -> list[np.ndarray]:
    """Float network inputs from the same capture path the runtime sees."""
    if source == "synthetic":
        produce = imaging.synthetic_producer(seed, count, width, height, pattern)
    else:
        produce = imaging.directory_producer(source, pattern)
    images = []
    while len(images) < count:
        frame = produce()
        if frame is None:
            break
        images.append(imaging.net_input_float(imaging.demosaic_bilinear(frame), g.input_resolution))
    if not images:
        raise SourceError("no calibration frames available")
    return images
