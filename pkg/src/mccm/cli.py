"""Command-line entry point: ``mccm eval | explore | validate | fmt``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

from . import __version__
from .analysis import accuracy, breakdown_dict, segments_csv
from .builder import accelerator_to_dict, build
from .composer import compose, reports_to_csv
from .descriptors import cnn_to_dict, load_cnn, load_platform, platform_to_dict
from .dse import POINT_FIELDS, DesignSpaceConfig, explore, point_row, verify_front
from .errors import InfeasibleDesign, MccmError, SimulationCapExceeded
from .notation import format_accelerator, parse_accelerator
from .sim import DEFAULT_CAP, simulate

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


class InputError(Exception):
    pass


def _sketch_text(arg: str) -> str:
    p = Path(arg)
    if not arg.lstrip().startswith("{") and p.is_file():
        return p.read_text().strip()
    return arg


def _load_inputs(args):
    try:
        cnn = load_cnn(args.cnn)
        platform = load_platform(args.platform)
    except (OSError, ValueError) as e:
        raise InputError(str(e)) from e
    if getattr(args, "clock_hz", None):
        platform = platform.with_(clock_hz=args.clock_hz, clock_assumed=False)
    return cnn, platform


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True).encode())
        h.update(b"\0")
    return h.hexdigest()


def _provenance(args, cnn, platform, extra=None) -> dict:
    out = {
        "tool": {"name": "mccm", "version": __version__},
        "input_digest": _digest(cnn_to_dict(cnn), platform_to_dict(platform), extra),
    }
    if getattr(args, "timestamp", False):
        out["timestamp"] = datetime.now(timezone.utc).isoformat()
    return out


def _write(text: str, path: str | None):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _parse(args, cnn):
    text = _sketch_text(args.sketch)
    pipelining = None
    if getattr(args, "no_inter_seg_pipelining", False):
        pipelining = False
    elif getattr(args, "inter_seg_pipelining", False):
        pipelining = True
    try:
        return parse_accelerator(text, cnn, pipelining)
    except ValueError as e:
        raise InputError(f"sketch: {e}") from e


# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    cnn, platform = _load_inputs(args)
    sketch = _parse(args, cnn)
    acc = build(sketch, cnn, platform)
    report = compose(acc)
    if args.emit_accelerator:
        Path(args.emit_accelerator).write_text(_dump(accelerator_to_dict(acc)))
    if args.csv:
        text = reports_to_csv([report])
        if args.breakdown:
            text += "\n" + segments_csv(report)
        _write(text, args.output)
        return EXIT_OK
    doc = report.to_dict()
    if args.breakdown:
        doc["breakdown"] = breakdown_dict(report)
    doc.update(_provenance(args, cnn, platform, format_accelerator(sketch)))
    _write(_dump(doc), args.output)
    return EXIT_OK


def _load_config(args) -> DesignSpaceConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"config: {e}") from e
    for key in ("sample_size", "rng_seed", "prefix_len"):
        v = getattr(args, key)
        if v is not None:
            doc[key] = v
    if args.families:
        doc["families"] = "all" if args.families == "all" else args.families.split(",")
    if args.ce_range:
        doc["ce_count_range"] = [int(x) for x in args.ce_range.split("-")]
    try:
        return DesignSpaceConfig.from_dict(doc)
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"config: {e}") from e


def cmd_explore(args) -> int:
    cnn, platform = _load_inputs(args)
    config = _load_config(args)
    result = explore(config, cnn, platform, jobs=args.jobs, baselines=not args.no_baselines)
    problems = verify_front(result.front, result.points)
    if problems:
        raise MccmError("Pareto verification failed: " + "; ".join(problems[:3]))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POINT_FIELDS)
    for p in result.points:
        w.writerow(point_row(p))
    pareto = {
        "objectives": [list(o) for o in config.objectives],
        "points": [{"index": p.index, "sketch": p.sketch, "family": p.family, **p.metrics}
                   for p in result.front.points],
        "ties": [list(t) for t in result.front.ties],
        "evaluated": len(result.points),
        "feasible": sum(p.feasible for p in result.points),
        "custom_space_size": result.space_size,
        "config": {"ce_count_range": list(config.ce_count_range), "families": list(config.families),
                   "sample_size": config.sample_size, "rng_seed": config.rng_seed,
                   "prefix_len": config.prefix_len},
    }
    pareto.update(_provenance(args, cnn, platform, pareto["config"]))
    points_path = args.points or args.output
    if points_path:
        Path(points_path).write_text(buf.getvalue())
    if args.pareto:
        Path(args.pareto).write_text(_dump(pareto))
    if not points_path:
        sys.stdout.write(buf.getvalue())
    if not args.pareto:
        sys.stdout.write(_dump(pareto))
    print(f"{len(result.points)} designs, mean {result.mean_eval_ms:.3f} ms/design "
          f"({result.mean_wall_ms:.3f} ms wall)", file=sys.stderr)
    return EXIT_OK


def _within_stage(analytic: Fraction, simulated: Fraction, stage: Fraction) -> bool:
    return abs(analytic - simulated) <= stage


def cmd_validate(args) -> int:
    cnn, platform = _load_inputs(args)
    sketch = _parse(args, cnn)
    acc = build(sketch, cnn, platform)
    report = compose(acc)
    sim = simulate(acc, cap=args.cap)
    compute_bound = not any(s.memory_bound for s in report.segments)
    stage = max((Fraction(max(st), platform.clock_hz) for st in sim.stage_cycles if st), default=Fraction(0))
    rows = [
        ("compute_cycles", report.compute_cycles, sim.cycles, True),
        ("access_bytes", report.access_bytes, sim.access_bytes, True),
        ("latency_s", report.latency_s, sim.time_s, compute_bound),
    ]
    metrics = []
    failed = False
    for name, est, ref, exact in rows:
        acc_pct = accuracy(float(ref), float(est)) if ref else (100.0 if est == ref else 0.0)
        if exact:
            ok = est == ref
        else:
            ok = _within_stage(Fraction(est), Fraction(ref), stage)
        failed |= not ok
        metrics.append({"metric": name, "analytical": float(est), "simulated": float(ref),
                        "accuracy_pct": round(acc_pct, 4), "check": "exact" if exact else "one_stage",
                        "ok": ok})
    doc = {"sketch": format_accelerator(sketch), "compute_bound": compute_bound, "metrics": metrics}
    doc.update(_provenance(args, cnn, platform, doc["sketch"]))
    if args.trace:
        Path(args.trace).write_text(simulate(acc, cap=args.cap, trace=True).trace_csv())
    _write(_dump(doc), args.output)
    return EXIT_MISMATCH if failed else EXIT_OK


def cmd_fmt(args) -> int:
    text = _sketch_text(args.sketch)
    cnn = None
    if args.cnn:
        try:
            cnn = load_cnn(args.cnn)
        except (OSError, ValueError) as e:
            raise InputError(str(e)) from e
    try:
        sketch = parse_accelerator(text, cnn)
    except ValueError as e:
        raise InputError(f"sketch: {e}") from e
    print(format_accelerator(sketch))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mccm", description=__doc__)
    ap.add_argument("--version", action="version", version=f"mccm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sketch=True):
        p.add_argument("cnn", help="CNN descriptor path or bundled name")
        p.add_argument("platform", help="platform descriptor path or bundled name")
        if sketch:
            p.add_argument("sketch", help="accelerator notation, or a file holding it")
        p.add_argument("--clock-hz", type=int, help="override the platform clock")
        p.add_argument("-o", "--output", help="write the main output here instead of stdout")
        p.add_argument("--timestamp", action="store_true", help="embed a timestamp in JSON output")
        if sketch:
            g = p.add_mutually_exclusive_group()
            g.add_argument("--no-inter-seg-pipelining", action="store_true")
            g.add_argument("--inter-seg-pipelining", action="store_true")

    p = sub.add_parser("eval", help="evaluate one accelerator")
    common(p)
    p.add_argument("--breakdown", action="store_true", help="add time, access, utilization, buffer views")
    p.add_argument("--emit-accelerator", metavar="PATH", help="write the built accelerator as JSON")
    p.add_argument("--csv", action="store_true", help="CSV instead of JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explore", help="explore the design space")
    common(p, sketch=False)
    p.add_argument("config", nargs="?", help="JSON design-space config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--sample-size", type=int)
    p.add_argument("--rng-seed", type=int)
    p.add_argument("--prefix-len", type=int)
    p.add_argument("--families", help="comma-separated family names or 'all'")
    p.add_argument("--ce-range", help="e.g. 2-11")
    p.add_argument("--points", help="CSV path for all points")
    p.add_argument("--pareto", help="JSON path for the Pareto summary")
    p.add_argument("--no-baselines", action="store_true", help="skip the fixed-family points")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("validate", help="compare the analytical model with the event simulator")
    common(p)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="maximum MACs to simulate")
    p.add_argument("--trace", metavar="PATH", help="write the event trace CSV")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fmt", help="print a sketch in canonical form")
    p.add_argument("sketch")
    p.add_argument("--cnn", help="resolve Last and check coverage against this CNN")
    p.set_defaults(func=cmd_fmt)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except InfeasibleDesign as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SimulationCapExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except MccmError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
