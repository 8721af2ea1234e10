"""Discrete-event reference simulator.

Runs a built accelerator tile by tile and transfer by transfer:

* compute cycles come from walking every PE-array step of every tile,
* a pipelined tile starts in the stage after both its predecessor on the
  same CE and the producer tile it reads from have finished,
* off-chip bytes come from explicit load/store events, chunk by chunk,
* all transfers of a segment queue FIFO on one channel at platform
  bandwidth from the segment's start; the segment ends once both compute and
  the channel are done.

The scheduling rules mirror the analytical model, but every count is
accumulated from events rather than taken from a closed form, which makes it
a check on the formulas.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from . import kernels
from .blocks import Access
from .builder import Accelerator
from .errors import SimulationCapExceeded

DEFAULT_CAP = 100_000_000
MAX_EVENTS = 2_000_000


@dataclass(frozen=True)
class TraceEvent:
    event: str
    cycle: int
    ce: int
    kind: str
    bytes: int


@dataclass
class SimReport:
    cycles: int
    time_s: Fraction
    access: Access
    segment_cycles: list[int]
    segment_time_s: list[Fraction]
    stage_cycles: list[list[int]]
    tiles_expected: int = 0
    tiles_scheduled: int = 0  # distinct (CE, tile) slots placed in a stage
    trace: list[TraceEvent] = field(default_factory=list)

    @property
    def access_bytes(self) -> int:
        return self.access.total

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("event", "cycle", "ce", "kind", "bytes"))
        for e in self.trace:
            w.writerow((e.event, e.cycle, e.ce, e.kind, e.bytes))
        return buf.getvalue()


class _Channel:
    """Single FIFO off-chip channel."""

    def __init__(self, bandwidth: int):
        self.bandwidth = bandwidth
        self.free_at = Fraction(0)
        self.weights = 0
        self.fms = 0
        self.count = 0

    def transfer(self, now: Fraction, nbytes: int, cls: str) -> Fraction:
        self.count += 1
        if self.count > MAX_EVENTS:
            raise SimulationCapExceeded("too many transfer events")
        start = max(now, self.free_at)
        self.free_at = start + Fraction(nbytes, self.bandwidth)
        if cls == "weights":
            self.weights += nbytes
        else:
            self.fms += nbytes
        return self.free_at


def _chunks(total: int, size: int):
    n = 0
    for start in range(0, total, size):
        n += 1
        if n > MAX_EVENTS:
            raise SimulationCapExceeded("too many chunks")
        yield min(size, total - start)


def _streaming_plan(ifms: int, weights: int, ibuf: int, wbuf: int):
    """Transfers of a layer reading off-chip IFMs; the cheaper of the two chunk orders."""
    input_reuse = []
    for c in _chunks(ifms, ibuf):
        input_reuse.append(("load_ifm", c, "fms"))
        input_reuse.append(("load_weights", weights, "weights"))
    weight_reuse = []
    for c in _chunks(weights, wbuf):
        weight_reuse.append(("load_weights", c, "weights"))
        weight_reuse.append(("load_ifm", ifms, "fms"))
    a = sum(t[1] for t in input_reuse)
    b = sum(t[1] for t in weight_reuse)
    return input_reuse if a <= b else weight_reuse


def _spilled_sources(acc: Accelerator) -> set[int]:
    """Residual sources whose copies live off-chip: single-CE sources with an off-chip OFM."""
    res = acc.buffers.layers
    pipelined = {l for b in acc.blocks if b.pipelined for l in b.layers}
    return {s for s in range(1, len(acc.cnn) + 1)
            if res[s - 1].ofms_off_chip and s not in pipelined}


def _walk(layer, rows, par):
    kernel = layer.reduction_depth * layer.kernel_h * layer.kernel_w
    return kernels.walk_blocks(layer.num_filters, rows, layer.ofm_w, kernel, *par.factors)


def _stage_of_tiles(tiles: list[int]) -> list[list[int]]:
    """Stage (1-based) of every tile from the dependency rules alone."""
    stages = []
    for j, t_count in enumerate(tiles):
        row = []
        for t in range(t_count):
            earliest = 1
            if t > 0:
                earliest = max(earliest, row[t - 1] + 1)
            if j > 0:
                producer = stages[j - 1][min(t, tiles[j - 1] - 1)]
                earliest = max(earliest, producer + 1)
            row.append(earliest)
        stages.append(row)
    return stages


def simulate(acc: Accelerator, cap: int = DEFAULT_CAP, trace: bool = False) -> SimReport:
    if acc is None or not acc.blocks:
        raise ValueError("empty accelerator")
    cnn, platform, buf = acc.cnn, acc.platform, acc.buffers
    if buf is None:
        raise ValueError("accelerator has no buffer allocation")
    total_macs = cnn.total_macs
    if total_macs > cap:
        raise SimulationCapExceeded(f"{total_macs} MACs exceed the simulation cap of {cap}")
    clock = platform.clock_hz
    n = len(cnn)
    spilled = _spilled_sources(acc)
    channel = _Channel(platform.bandwidth)
    events: list[TraceEvent] = []
    now = Fraction(0)
    seg_cycles, seg_times, stage_log = [], [], []
    expected = 0
    slots: set = set()
    boundaries = buf.boundaries

    def log(event, t, ce, kind, nbytes):
        if trace:
            events.append(TraceEvent(event, int(t * clock), ce, kind, nbytes))

    for k, (bidx, _, layers) in enumerate(acc.segments):
        block = acc.blocks[bidx]
        transfers = []
        if k > 0 and not boundaries[k - 1].on_chip:
            b = boundaries[k - 1]
            nbytes = b.size
            if buf.layers[layers[0] - 1].ifms_off_chip:
                # the first layer streams its IFM itself; only the residual copies come in here
                nbytes -= cnn.layer(b.after_layer).ofms_bytes
            if nbytes:
                transfers.append(("load_boundary", nbytes, "fms", 0))
        for l in layers:
            layer = cnn.layer(l)
            for s in layer.residual_sources:
                if s in spilled:
                    transfers.append(("load_residual", cnn.layer(s).ofms_bytes, "fms", block.ce_of(l)))

        stages: list[int] = []
        if block.pipelined:
            tiles, tile_cycles = [], []
            for pos, l in enumerate(layers):
                layer = cnn.layer(l)
                par = acc.ce(block.ce_ids[pos]).parallelism
                rows = buf.layers[l - 1].tile_rows
                cyc = []
                for r in _chunks(layer.ofm_h, rows):
                    cyc.append(_walk(layer, r, par)[0])
                tiles.append(len(cyc))
                tile_cycles.append(cyc)
            placement = _stage_of_tiles(tiles)
            n_stages = max(max(row) for row in placement)
            stages = [0] * n_stages
            for j, row in enumerate(placement):
                expected += tiles[j]
                for t, s in enumerate(row):
                    stages[s - 1] = max(stages[s - 1], tile_cycles[j][t])
                    slots.add((layers[j], t))
            for pos, l in enumerate(layers):
                layer = cnn.layer(l)
                ce = block.ce_ids[pos]
                if l == 1:
                    transfers.append(("load_ifm", layer.ifms_bytes, "fms", ce))
                resident = buf.layers[l - 1].weights_resident_after_first_load
                loads = 1 if resident else len(placement[pos])
                for _ in range(loads):
                    transfers.append(("load_weights", layer.weights_bytes, "weights", ce))
                if l == n:
                    transfers.append(("store_ofm", layer.ofms_bytes, "fms", ce))
        else:
            ce = block.ce_ids[0]
            par = acc.ce(ce).parallelism
            cb = buf.ce[ce]
            for l in layers:
                layer = cnn.layer(l)
                r = buf.layers[l - 1]
                stages.append(_walk(layer, layer.ofm_h, par)[0])
                expected += 1
                slots.add((l, 0))
                if r.ifms_off_chip:
                    for name, nbytes, cls in _streaming_plan(layer.ifms_bytes, layer.weights_bytes,
                                                             cb.ifm_buffer_bytes, cb.weights_buffer_bytes):
                        transfers.append((name, nbytes, cls, ce))
                else:
                    if l == 1:
                        transfers.append(("load_ifm", layer.ifms_bytes, "fms", ce))
                    per_filter = layer.weights_bytes // layer.num_filters
                    for f in _chunks(layer.num_filters, par.filters):
                        transfers.append(("load_weights", f * per_filter, "weights", ce))
                if r.ofms_off_chip or l == n:
                    transfers.append(("store_ofm", layer.ofms_bytes, "fms", ce))
        if k < len(boundaries) and not boundaries[k].on_chip:
            b = boundaries[k]
            nbytes = b.size
            if buf.layers[layers[-1] - 1].ofms_off_chip:
                nbytes -= cnn.layer(layers[-1]).ofms_bytes  # already stored with the layer
            if nbytes:
                transfers.append(("store_boundary", nbytes, "fms", 0))

        start = now
        drained = start
        for name, nbytes, cls, ce in transfers:
            drained = channel.transfer(start, nbytes, cls)
            log(name, start, ce, cls, nbytes)
        cycles = sum(stages)
        t = start
        for s, c in enumerate(stages):
            log("stage", t, block.ce_ids[0], f"compute{s + 1}", 0)
            t += Fraction(c, clock)
        end = max(t, drained)
        seg_cycles.append(cycles)
        seg_times.append(end - start)
        stage_log.append(stages)
        now = end
        if k < len(boundaries) and not boundaries[k].on_chip:
            log("handover", now, 0, "boundary", boundaries[k].size)
            now += Fraction(boundaries[k].size, platform.bandwidth)

    return SimReport(
        cycles=sum(seg_cycles),
        time_s=now,
        access=Access(weights=channel.weights, fms=channel.fms),
        segment_cycles=seg_cycles,
        segment_time_s=seg_times,
        stage_cycles=stage_log,
        tiles_expected=expected,
        tiles_scheduled=len(slots),
        trace=events,
    )
