"""Bottleneck views over an evaluation report.

All breakdowns keep exact integers or fractions; rounding happens only when
rows are written out.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

from .composer import EvalReport, compose


@dataclass(frozen=True)
class SegmentTime:
    segment: int
    compute: Fraction  # share of total execution time spent computing
    idle: Fraction  # share of total execution time waiting on memory
    memory: Fraction  # memory time as a share of total execution time
    idle_fraction: Fraction  # idle share within the segment itself
    memory_bound: bool


@dataclass(frozen=True)
class TimeBreakdown:
    segments: tuple[SegmentTime, ...]
    total_s: Fraction
    global_idle: Fraction


def time_breakdown(report: EvalReport) -> TimeBreakdown:
    """Per-segment compute and idle time as shares of the summed segment time."""
    total = sum((s.effective_s for s in report.segments), Fraction(0))
    rows = []
    idle_total = Fraction(0)
    for s in report.segments:
        idle = s.effective_s - s.compute_s
        idle_total += idle
        rows.append(SegmentTime(s.index, s.compute_s / total, idle / total, s.memory_s / total,
                                s.idle_fraction, s.memory_bound))
    return TimeBreakdown(tuple(rows), total, idle_total / total)


def access_breakdown(report: EvalReport) -> dict:
    return {"weights_bytes": report.access.weights, "fms_bytes": report.access.fms}


@dataclass(frozen=True)
class Profile:
    values: tuple[Fraction, ...]
    normalized: tuple[Fraction, ...]


def underutilization_profile(source) -> Profile:
    """Per-segment PE underutilization, also normalised to the smallest nonzero entry.

    Accepts a report or a built accelerator.
    """
    report = source if isinstance(source, EvalReport) else compose(source)
    vals = tuple(s.underutilization for s in report.segments)
    nonzero = [v for v in vals if v > 0]
    ref = min(nonzero) if nonzero else None
    norm = tuple(v / ref if ref else Fraction(0) for v in vals)
    return Profile(vals, norm)


@dataclass(frozen=True)
class BufferEntry:
    label: str
    bytes: int
    share: Fraction


def buffer_profile(source) -> list[BufferEntry]:
    """Block buffers followed by inter-segment buffers, each with its share of the total."""
    report = source if isinstance(source, EvalReport) else compose(source)
    entries = [(f"block{b.index}", b.metrics.buffer_bytes) for b in report.blocks]
    entries += [(f"inter{k}", v) for k, v in enumerate(report.group_buffer_bytes) if v]
    return shares(entries)


def shares(entries) -> list[BufferEntry]:
    total = sum(v for _, v in entries)
    return [BufferEntry(label, v, Fraction(v, total) if total else Fraction(0)) for label, v in entries]


def accuracy(synthesis_value: float, estimated_value: float) -> float:
    """Agreement of an estimate with a reference value, in percent."""
    if synthesis_value <= 0:
        raise ValueError("reference value must be positive")
    return 100.0 * (1.0 - abs(synthesis_value - estimated_value) / synthesis_value)


def _sig(x, digits=4) -> str:
    return f"{float(x):.{digits}g}"


SEGMENT_CSV_FIELDS = ("segment", "compute_s", "memory_s", "idle_frac", "buffer_bytes", "underutil")


def segments_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEGMENT_CSV_FIELDS)
    for s in report.segments:
        w.writerow([s.index, _sig(s.compute_s), _sig(s.memory_s), _sig(s.idle_fraction), s.buffer_bytes,
                    _sig(s.underutilization)])
    return buf.getvalue()


def breakdown_dict(report: EvalReport) -> dict:
    """Analysis sections for JSON output, rounded to four significant digits."""
    tb = time_breakdown(report)
    up = underutilization_profile(report)
    return {
        "time_breakdown": {
            "global_idle": float(_sig(tb.global_idle)),
            "segments": [
                {"segment": r.segment, "compute": float(_sig(r.compute)), "idle": float(_sig(r.idle)),
                 "memory": float(_sig(r.memory)), "idle_fraction": float(_sig(r.idle_fraction)),
                 "memory_bound": r.memory_bound}
                for r in tb.segments
            ],
        },
        "access_breakdown": access_breakdown(report),
        "underutilization": {
            "values": [float(_sig(v)) for v in up.values],
            "normalized_to_min": [float(_sig(v)) for v in up.normalized],
        },
        "buffer_profile": [
            {"label": e.label, "bytes": e.bytes, "share": float(_sig(e.share))} for e in buffer_profile(report)
        ],
    }
