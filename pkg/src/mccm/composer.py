"""Whole-accelerator metrics from per-segment block metrics.

A segment is one single-CE block or one round-robin pass of a pipelined
block. Segment time is max(compute, memory): transfers overlap compute up to
whichever bound is larger. Off-chip boundaries add their transfer time once
more as hand-over latency between segments.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .blocks import Access, BlockMetrics, ce_busy_cycles, pipeline_schedule, pipelined_block_latency, \
    single_ce_layer_accesses, underutilization
from .builder import Accelerator, build
from .descriptors import CnnModel, FpgaPlatform
from .notation import AcceleratorSketch, format_accelerator, parse_accelerator


@dataclass(frozen=True)
class Segment:
    index: int
    block: int
    pass_index: int
    layers: tuple[int, ...]

    @property
    def span(self) -> tuple[int, int]:
        return self.layers[0], self.layers[-1]


@dataclass(frozen=True)
class SegmentPlan:
    segments: tuple[Segment, ...]
    inter_segment_pipelining: bool

    def of_block(self, block: int) -> list[Segment]:
        return [s for s in self.segments if s.block == block]


def plan_segments(acc: Accelerator) -> SegmentPlan:
    segs = tuple(Segment(i, b, p, layers) for i, (b, p, layers) in enumerate(acc.segments))
    return SegmentPlan(segs, acc.sketch.inter_segment_pipelining)


def effective_time(compute_cycles: int, access_bytes: int, platform: FpgaPlatform):
    """(compute_s, memory_s, effective_s, idle_fraction) under the max-overlap rule."""
    compute = Fraction(compute_cycles, platform.clock_hz)
    memory = Fraction(access_bytes, platform.bandwidth)
    eff = max(compute, memory)
    idle = (eff - compute) / eff if eff > compute else Fraction(0)
    return compute, memory, eff, idle


@dataclass(frozen=True)
class SegmentReport:
    index: int
    block: int
    pass_index: int
    kind: str
    layers: tuple[int, int]
    compute_cycles: int
    ce_busy_cycles: tuple[int, ...]
    access: Access  # accesses of the segment's own layers, mandatory loads included
    traffic_bytes: int  # access plus the boundary transfers it performs
    compute_s: Fraction
    memory_s: Fraction
    effective_s: Fraction
    idle_fraction: Fraction
    buffer_bytes: int
    macs: int
    pe_cycles: int
    underutilization: Fraction

    @property
    def memory_bound(self) -> bool:
        return self.idle_fraction > 0


@dataclass(frozen=True)
class BoundaryReport:
    after_layer: int
    size: int
    on_chip: bool
    group: int
    store_bytes: int
    load_bytes: int
    comm_s: Fraction

    @property
    def access_bytes(self) -> int:
        return self.store_bytes + self.load_bytes


@dataclass(frozen=True)
class BlockReport:
    index: int
    kind: str
    ces: tuple[int, ...]
    segments: tuple[int, ...]
    metrics: BlockMetrics
    period_s: Fraction


@dataclass
class EvalReport:
    cnn: str
    platform: str
    sketch: str
    inter_segment_pipelining: bool
    clock_hz: int
    clock_assumed: bool
    latency_s: Fraction
    throughput: Fraction
    buffer_bytes: int
    access: Access
    segments: list[SegmentReport]
    boundaries: list[BoundaryReport]
    blocks: list[BlockReport]
    group_buffer_bytes: tuple[int, ...]
    full_fit: bool
    spills: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    @property
    def access_bytes(self) -> int:
        return self.access.total

    @property
    def latency_cycles(self) -> Fraction:
        return self.latency_s * self.clock_hz

    @property
    def compute_cycles(self) -> int:
        return sum(s.compute_cycles for s in self.segments)

    @property
    def access_breakdown(self) -> dict:
        return {"weights_bytes": self.access.weights, "fms_bytes": self.access.fms}

    def summary(self) -> dict:
        return {
            "latency_s": float(self.latency_s),
            "throughput": float(self.throughput),
            "buffer_bytes": self.buffer_bytes,
            "access_bytes": self.access_bytes,
        }

    def to_dict(self) -> dict:
        out = {
            "cnn": self.cnn,
            "platform": self.platform,
            "sketch": self.sketch,
            "inter_segment_pipelining": self.inter_segment_pipelining,
            "clock_hz": self.clock_hz,
            "clock_assumed": self.clock_assumed,
            **self.summary(),
            "latency_cycles": float(self.latency_cycles),
            "full_fit": self.full_fit,
            "access_breakdown": self.access_breakdown,
            "segments": [
                {
                    "index": s.index,
                    "block": s.block,
                    "pass": s.pass_index,
                    "kind": s.kind,
                    "layers": list(s.layers),
                    "compute_cycles": s.compute_cycles,
                    "compute_s": float(s.compute_s),
                    "memory_s": float(s.memory_s),
                    "effective_s": float(s.effective_s),
                    "idle_fraction": float(s.idle_fraction),
                    "memory_bound": s.memory_bound,
                    "buffer_bytes": s.buffer_bytes,
                    "underutilization": float(s.underutilization),
                    "access_bytes": s.access.total,
                    "weights_bytes": s.access.weights,
                    "fms_bytes": s.access.fms,
                }
                for s in self.segments
            ],
            "boundaries": [
                {"after_layer": b.after_layer, "size": b.size, "on_chip": b.on_chip, "group": b.group,
                 "store_bytes": b.store_bytes, "load_bytes": b.load_bytes, "access_bytes": b.access_bytes,
                 "comm_s": float(b.comm_s)}
                for b in self.boundaries
            ],
            "blocks": [
                {"index": b.index, "kind": b.kind, "ces": list(b.ces), "segments": list(b.segments),
                 "buffer_bytes": b.metrics.buffer_bytes, "latency_cycles": b.metrics.latency_cycles,
                 "period_s": float(b.period_s), "access_bytes": b.metrics.access_bytes}
                for b in self.blocks
            ],
            "inter_segment_buffer_bytes": list(self.group_buffer_bytes),
            "spills": list(self.spills),
        }
        out.update(self.extra)
        return out


CSV_FIELDS = ("cnn", "platform", "sketch", "latency_s", "throughput", "buffer_bytes", "access_bytes",
              "weights_bytes", "fms_bytes")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerow([r.cnn, r.platform, r.sketch, repr(float(r.latency_s)), repr(float(r.throughput)),
                    r.buffer_bytes, r.access_bytes, r.access.weights, r.access.fms])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# per-layer quantities


def _layer_factors(acc: Accelerator) -> np.ndarray:
    n = len(acc.cnn)
    fac = np.ones((n, 3), dtype=np.int64)
    for b in acc.blocks:
        for l in b.layers:
            fac[l - 1] = acc.ce(b.ce_of(l)).parallelism.factors
    return fac


def _ceil(a, b):
    return -(-a // b)


def layer_cycles(acc: Accelerator) -> tuple[np.ndarray, np.ndarray]:
    """Whole-layer cycles and per-tile cycles for every layer."""
    arr = acc.cnn.arrays
    fac = _layer_factors(acc)
    pf, ph, pw = fac[:, 0], fac[:, 1], fac[:, 2]
    base = _ceil(arr.filters, pf) * _ceil(arr.out_w, pw) * arr.reduction
    whole = base * _ceil(arr.out_h, ph)
    rows = np.array([r.tile_rows or arr.out_h[i] for i, r in enumerate(acc.buffers.layers)], dtype=np.int64)
    tile = base * _ceil(rows, ph)
    return whole, tile


# ---------------------------------------------------------------------------


def _segment_metrics(acc, seg: Segment, whole, tile, first_last):
    arr = acc.cnn.arrays
    buf = acc.buffers
    block = acc.blocks[seg.block]
    idx = np.asarray(seg.layers) - 1
    first_ifm, last_ofm = first_last
    if block.pipelined:
        tiles = [buf.layers[i].tiles for i in idx]
        sched = pipeline_schedule(tiles)
        lat = [int(tile[i]) for i in idx]
        cycles = pipelined_block_latency(lat, sched)
        busy = tuple(ce_busy_cycles(lat, sched))
        pes = [acc.ce(block.ce_ids[p]).pe_count for p in range(len(idx))]
        weights = 0
        reload = 0
        for i, t in zip(idx, tiles):
            r = buf.layers[i]
            weights += int(arr.weights[i]) * (1 if r.weights_resident_after_first_load else t)
            reload += r.residual_reload_bytes
        access = Access(weights=weights, fms=reload)
        seg_buffer = _pass_buffer(acc, block, idx)
        pe_cycles = sum(p * b for p, b in zip(pes, busy))
    else:
        pe = acc.ce(block.ce_ids[0]).pe_count
        cycles = int(whole[idx].sum())
        busy = (cycles,)
        split = buf.ce[block.ce_ids[0]]
        access = Access()
        for i in idx:
            r = buf.layers[i]
            access = access + single_ce_layer_accesses(
                int(arr.ifms[i]), int(arr.ofms[i]), int(arr.weights[i]), r.ifms_off_chip, r.ofms_off_chip,
                split.ifm_buffer_bytes, split.weights_buffer_bytes)
            access = access + Access(fms=r.residual_reload_bytes)
        seg_buffer = buf.block_bytes[seg.block]
        pe_cycles = pe * cycles
    if seg.layers[0] == 1 and first_ifm:
        access = access + Access(fms=first_ifm)
    if seg.layers[-1] == len(acc.cnn) and last_ofm:
        access = access + Access(fms=last_ofm)
    macs = int(arr.macs[idx].sum())
    return cycles, busy, access, seg_buffer, macs, pe_cycles


def _pass_buffer(acc, block, idx) -> int:
    arr = acc.cnn.arrays
    buf = acc.buffers
    total = 0
    for p, i in enumerate(idx):
        r = buf.layers[i]
        if r.weights_resident_after_first_load:
            total += int(arr.weights[i])
        else:
            pf = acc.ce(block.ce_ids[p]).parallelism.filters
            total += min(pf, int(arr.filters[i])) * int(arr.per_filter_weights[i])
        total += 2 * r.fm_tile_bytes
    return total


def mandatory_transfers(acc: Accelerator) -> tuple[int, int]:
    """First-layer IFM load and last-layer OFM store not already counted by residency flags."""
    arr = acc.cnn.arrays
    first = acc.buffers.layers[0]
    last = acc.buffers.layers[-1]
    first_ifm = 0 if first.ifms_off_chip else int(arr.ifms[0])
    last_ofm = 0 if last.ofms_off_chip else int(arr.ofms[-1])
    return first_ifm, last_ofm


def multi_segment_block_metrics(parts) -> BlockMetrics:
    """Combine (latency_cycles, period_cycles, buffer_bytes, access) of the segments one block owns.

    Latency and accesses add up; the buffer is the worst case over segments
    since the block's hardware is sized once.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("block owns no segment")
    access = Access()
    for p in parts:
        access = access + p[3]
    return BlockMetrics(
        latency_cycles=sum(p[0] for p in parts),
        period_cycles=sum(p[1] for p in parts),
        buffer_bytes=max(p[2] for p in parts),
        access=access,
    )


def compose(acc: Accelerator, plan: SegmentPlan | None = None) -> EvalReport:
    plan = plan or plan_segments(acc)
    platform = acc.platform
    buf = acc.buffers
    whole, tile = layer_cycles(acc)
    first_last = mandatory_transfers(acc)

    bounds = []
    for b in buf.boundaries:
        off = 0 if b.on_chip else b.size
        bounds.append(BoundaryReport(b.after_layer, b.size, b.on_chip, b.group, b.store_bytes, b.load_bytes,
                                     Fraction(off, platform.bandwidth)))

    segs = []
    for seg in plan.segments:
        cycles, busy, access, seg_buffer, macs, pe_cycles = _segment_metrics(acc, seg, whole, tile, first_last)
        traffic = access.total
        if seg.index > 0:
            traffic += bounds[seg.index - 1].load_bytes
        if seg.index < len(bounds):
            traffic += bounds[seg.index].store_bytes
        compute_s, memory_s, eff, idle = effective_time(cycles, traffic, platform)
        kind = "pipelined" if acc.blocks[seg.block].pipelined else "single"
        segs.append(SegmentReport(seg.index, seg.block, seg.pass_index, kind, seg.span, cycles, busy, access,
                                  traffic, compute_s, memory_s, eff, idle, seg_buffer, macs, pe_cycles,
                                  underutilization(macs, pe_cycles)))

    blocks = []
    for b in acc.blocks:
        own = [s for s in segs if s.block == b.index]
        parts = [(s.compute_cycles, max(s.ce_busy_cycles), s.buffer_bytes, s.access) for s in own]
        m = multi_segment_block_metrics(parts)
        m = BlockMetrics(m.latency_cycles, m.period_cycles, buf.block_bytes[b.index], m.access,
                         tuple(s.underutilization for s in own))
        if b.pipelined:
            # CEs keep streaming from one pass into the next, so the busiest CE bounds the rate
            per_ce = np.zeros(len(b.ce_ids), dtype=object)
            for s in own:
                per_ce[:len(s.ce_busy_cycles)] += np.array(s.ce_busy_cycles, dtype=object)
            compute = Fraction(int(per_ce.max()), platform.clock_hz)
            memory = Fraction(sum(s.traffic_bytes for s in own), platform.bandwidth)
            period = max(compute, memory)
        else:
            period = own[0].effective_s
        blocks.append(BlockReport(b.index, "pipelined" if b.pipelined else "single", b.ce_ids,
                                  tuple(s.index for s in own), m, period))

    latency = sum((s.effective_s for s in segs), Fraction(0)) + sum((b.comm_s for b in bounds), Fraction(0))
    if len(blocks) == 1:
        period = blocks[0].period_s if blocks[0].kind == "pipelined" else latency
    elif plan.inter_segment_pipelining:
        period = max(b.period_s for b in blocks)
    else:
        period = latency
    access = Access()
    for s in segs:
        access = access + s.access
    access = access + Access(fms=sum(b.access_bytes for b in bounds))
    return EvalReport(
        cnn=acc.cnn.name,
        platform=platform.name,
        sketch=format_accelerator(acc.sketch),
        inter_segment_pipelining=plan.inter_segment_pipelining,
        clock_hz=platform.clock_hz,
        clock_assumed=platform.clock_assumed,
        latency_s=latency,
        throughput=1 / period,
        buffer_bytes=buf.total_bytes,
        access=access,
        segments=segs,
        boundaries=bounds,
        blocks=blocks,
        group_buffer_bytes=buf.group_bytes,
        full_fit=buf.full_fit,
        spills=buf.spills,
    )


def evaluate(sketch: AcceleratorSketch | str, cnn: CnnModel, platform: FpgaPlatform,
             inter_segment_pipelining: bool | None = None, budget: int | None = None) -> EvalReport:
    """Parse (if needed), build and compose in one call."""
    if isinstance(sketch, str):
        sketch = parse_accelerator(sketch, cnn, inter_segment_pipelining)
    elif inter_segment_pipelining is not None and inter_segment_pipelining != sketch.inter_segment_pipelining:
        sketch = AcceleratorSketch(sketch.blocks, inter_segment_pipelining)
    return compose(build(sketch, cnn, platform, budget))
