"""Command-line entry point: build, quantize, plan, run, sweep, eval, report.

Exit codes: 0 success, 2 configuration error, 3 model error, 4 planning error.
An optional ``--config`` file of ``key = value`` lines supplies defaults for
the chosen subcommand (keys are long flag names with dashes or underscores);
flags given on the command line override it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .detect import eval_map, read_ground_truth, read_predictions
from .netzoo import build_graph, fileformat
from .netzoo.graph import GraphError, count_params
from .netzoo.weights import init_weights
from .planner import InfeasibleBudget, MemBudget, format_schedule, plan_tiles
from .powermodel import (
    DEFAULT_DVFS_GRID, dvfs_sweep, energy_report, format_energy_report, format_sweep, load_profile,
)
from .quantizer import format_calibration_report, ptq, quant_error


EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_PLAN = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _budget(args) -> MemBudget:
    try:
        return MemBudget(args.l1_bytes, args.l2_bytes, args.l3_bytes)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _load_any(path):
    try:
        return fileformat.load(path)
    except FileNotFoundError:
        raise pipeline.ModelError(f"model file {path} not found") from None
    except (fileformat.FormatError, GraphError) as e:
        raise pipeline.ModelError(f"{path}: {e}") from None


def cmd_build(args) -> int:
    try:
        g = build_graph(args.version, args.size, args.classes, args.resolution, args.activation)
    except GraphError as e:
        raise ConfigError(str(e)) from None
    ws = init_weights(g, args.seed)
    fileformat.save(args.out, g, ws)
    text = fileformat.manifest(g, ws)
    if args.manifest:
        Path(args.manifest).write_text(text)
    print(text if args.verbose else "\n".join(text.splitlines()[:9]))
    print(f"wrote {args.out} ({count_params(g) / 1e6:.3f} M params)")
    return EXIT_OK


def cmd_quantize(args) -> int:
    g, ws = _load_any(args.model)
    if not ws.float_weights:
        raise pipeline.ModelError(f"{args.model} has no float master weights to calibrate")
    images = pipeline.calibration_images(g, args.calib_frames, args.seed, args.calib_source, args.pattern)
    qws = ptq(g, ws, images)
    fileformat.save(args.out, g, qws)
    errors = quant_error(g, qws, images[:1]) if args.error_report else None
    report = format_calibration_report(g, qws, errors)
    if args.report:
        Path(args.report).write_text(report)
    heads = ", ".join(f"{n}: {errors[n].rmse_steps:.2f} steps rmse" for n in g.outputs) if errors else ""
    print(f"calibrated {len(qws.tensor_qparams)} tensors on {len(images)} frames; wrote {args.out}")
    if heads:
        print(f"head error vs float: {heads}")
    return EXIT_OK


def cmd_plan(args) -> int:
    g, _ = _load_any(args.model)
    profile = load_profile(args.profile)
    schedule = plan_tiles(g, _budget(args), not args.no_double_buffer)
    text = format_schedule(g, schedule, pipeline.machine_from_profile(profile))
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = pipeline.RunConfig(
        model=args.model, out_dir=args.out_dir, source=args.source, frames=args.frames,
        frame_width=args.frame_width, frame_height=args.frame_height, pattern=args.pattern,
        budget=_budget(args), double_buffer=not args.no_double_buffer, profile=args.profile,
        timing=args.timing, conf_threshold=args.conf, iou_threshold=args.iou, resize=args.resize,
        seed=args.seed, wallclock=args.wallclock, write_images=not args.no_images,
    )
    report = pipeline.run_pipeline(cfg)
    print(pipeline.format_report(report), end="")
    return EXIT_OK


def _parse_points(text: str) -> list[tuple[float, float]]:
    """'0.8:370,0.7:250' -> [(0.8, 370e6), (0.7, 250e6)] (frequency in MHz)."""
    points = []
    for item in text.split(","):
        v, sep, f = item.strip().partition(":")
        if not sep:
            raise ConfigError(f"operating point {item!r} is not voltage:MHz")
        points.append((float(v), float(f) * 1e6))
    return points


def cmd_sweep(args) -> int:
    profile = load_profile(args.profile)
    if args.cycles is not None:
        cycles = args.cycles
    elif args.model:
        g, _ = _load_any(args.model)
        schedule = plan_tiles(g, _budget(args), not args.no_double_buffer)
        cycles = pipeline.inference_model(g, schedule, pipeline.machine_from_profile(profile)).cycles
    else:
        raise ConfigError("sweep needs --model or --cycles")
    points = _parse_points(args.points) if args.points else list(DEFAULT_DVFS_GRID)
    if not points:
        raise ConfigError("empty operating point list")
    ops, front = dvfs_sweep(cycles, points, profile.dvfs_c_dyn, profile.dvfs_leak_w_per_v)
    text = format_sweep(ops, front)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    print(f"# {cycles} cycles, {len(ops)} points, {len(front)} on the Pareto frontier", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    gts = read_ground_truth(args.gt)
    preds = read_predictions(args.preds)
    for image_id in gts:
        preds.setdefault(image_id, [])
    if not gts and not preds:
        raise ConfigError("no images in ground truth or predictions")
    r = eval_map(preds, gts)
    lines = [f"mAP@[.50:.95]  {r.map:.6f}"]
    lines += [f"AP@{t:.2f}        {v:.6f}" for t, v in r.per_threshold.items()]
    lines += [f"class {c:<4}     {v:.6f}" for c, v in r.per_class.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    r = energy_report(load_profile(args.profile))
    text = format_energy_report(r)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    if args.json:
        Path(args.json).write_text(json.dumps(r.__dict__, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _add_budget(p: argparse.ArgumentParser):
    p.add_argument("--l1-bytes", type=int, default=128 * 1024)
    p.add_argument("--l2-bytes", type=int, default=1536 * 1024)
    p.add_argument("--l3-bytes", type=int, default=8 * 1024 * 1024)
    p.add_argument("--no-double-buffer", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="tyrt", description="int8 TinyissimoYOLO runtime and benchmark harness")
    parser.add_argument("--config", help="key = value defaults for the subcommand")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["build"] = sub.add_parser("build", help="build a network and write a TYRT model file")
    p.add_argument("--version", required=True, choices=["v1_3", "v5", "v8", "v10"])
    p.add_argument("--size", default="big", choices=["small", "big"])
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--activation", default="silu", choices=["silu", "leaky"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="also write the text manifest here")
    p.add_argument("--verbose", action="store_true", help="print the full layer table")
    p.set_defaults(func=cmd_build)

    p = subs["quantize"] = sub.add_parser("quantize", help="min/max calibrate and emit int8 weights")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--calib-frames", type=int, default=8)
    p.add_argument("--calib-source", default="synthetic", help="'synthetic' or a directory of PGM frames")
    p.add_argument("--pattern", default="RGGB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the per-tensor calibration table here")
    p.add_argument("--error-report", action="store_true", help="measure int8 vs float error")
    p.set_defaults(func=cmd_quantize)

    p = subs["plan"] = sub.add_parser("plan", help="tile the network for a memory budget")
    p.add_argument("--model", required=True)
    p.add_argument("--profile", default="paper-gap9")
    p.add_argument("--out")
    _add_budget(p)
    p.set_defaults(func=cmd_plan)

    p = subs["run"] = sub.add_parser("run", help="run the capture-to-detection loop")
    p.add_argument("--model", required=True)
    p.add_argument("--source", default="synthetic", help="'synthetic' or a directory of PGM frames")
    p.add_argument("--frames", type=int, default=10, help="synthetic frame count")
    p.add_argument("--frame-width", type=int, default=320)
    p.add_argument("--frame-height", type=int, default=320)
    p.add_argument("--pattern", default="RGGB")
    p.add_argument("--profile", default="paper-gap9")
    p.add_argument("--timing", default="profile", choices=["profile", "model"])
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.45)
    p.add_argument("--resize", default="nearest", choices=["nearest", "bilinear"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--wallclock", action="store_true", help="also report host wall-clock time")
    p.add_argument("--no-images", action="store_true", help="skip annotated PPM output")
    _add_budget(p)
    p.set_defaults(func=cmd_run)

    p = subs["sweep"] = sub.add_parser("sweep", help="DVFS sweep with Pareto frontier")
    p.add_argument("--model")
    p.add_argument("--cycles", type=int, help="use this cycle count instead of planning a model")
    p.add_argument("--points", help="comma list of voltage:MHz pairs (default: built-in grid)")
    p.add_argument("--profile", default="paper-gap9")
    p.add_argument("--out")
    _add_budget(p)
    p.set_defaults(func=cmd_sweep)

    p = subs["eval"] = sub.add_parser("eval", help="COCO-style mAP of prediction files")
    p.add_argument("--preds", required=True, help="prediction file or directory of *.txt")
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = subs["report"] = sub.add_parser("report", help="stage energy table and battery runtime")
    p.add_argument("--profile", default="paper-gap9")
    p.add_argument("--out")
    p.add_argument("--json")
    p.set_defaults(func=cmd_report)
    return parser, subs


def _config_defaults(path: str) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(sub: argparse.ArgumentParser, cfg: dict[str, str]):
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        a = actions.get(key)
        if a is None:
            raise ConfigError(f"config key {key!r} is not an option of this command")
        if isinstance(a, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = a.type(value) if a.type else value
        a.required = False
    sub.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    # config defaults must be in place before the subcommand enforces required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in subs), None)
    try:
        if known.config and command:
            _apply_config(subs[command], _config_defaults(known.config))
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(f"tyrt: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, pipeline.SourceError) as e:
        print(f"tyrt: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.ModelError as e:
        print(f"tyrt: model error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except InfeasibleBudget as e:
        print(f"tyrt: planning error: {e}", file=sys.stderr)
        return EXIT_PLAN
    except ValueError as e:
        print(f"tyrt: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
