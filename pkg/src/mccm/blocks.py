"""Analytical models of the two building blocks.

single-CE      layers run one after another on one CE
pipelined-CEs  one layer per CE, layers overlap at tile granularity

Cycle counts are exact integers; rates are ``fractions.Fraction`` so the
throughput/latency identities can be checked without rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import kernels


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


def tile_latency(layer, factors, rows: int | None = None) -> int:
    """Cycles for ``rows`` output rows of ``layer`` on a CE with ``factors`` (pf, ph, pw)."""
    pf, ph, pw = factors
    rows = layer.ofm_h if rows is None else rows
    return (_ceil(layer.num_filters, pf) * _ceil(rows, ph) * _ceil(layer.ofm_w, pw)
            * layer.reduction_depth * layer.kernel_h * layer.kernel_w)


def single_ce_layer_latency(layer, ce) -> int:
    """Product over the six loop dimensions of ceil(size / unroll)."""
    return tile_latency(layer, ce.parallelism.factors)


def single_ce_latency(layers, ce) -> int:
    return sum(single_ce_layer_latency(l, ce) for l in layers)


def underutilization(macs: int, pe_cycles: int) -> Fraction:
    """Fraction of PE-cycles doing no useful MAC."""
    if pe_cycles == 0:
        return Fraction(0)
    return 1 - Fraction(macs, pe_cycles)


# ---------------------------------------------------------------------------
# pipeline schedule


@dataclass(frozen=True)
class Schedule:
    """Skewed tile schedule: CE j (1-based) works on tile s-j+1 during stage s."""

    tiles: tuple[int, ...]
    tile_elements: tuple[tuple[int, ...], ...] = ()

    @property
    def num_ces(self) -> int:
        return len(self.tiles)

    @property
    def num_stages(self) -> int:
        return max(t + j for j, t in enumerate(self.tiles))

    def active_stages(self, ce: int) -> range:
        """1-based stages in which CE ``ce`` (1-based) is busy."""
        return range(ce, ce + self.tiles[ce - 1])

    def active_ces(self, stage: int) -> list[int]:
        return [j for j in range(1, self.num_ces + 1) if j <= stage < j + self.tiles[j - 1]]

    def tile_at(self, stage: int, ce: int) -> int | None:
        t = stage - ce + 1
        return t if 1 <= t <= self.tiles[ce - 1] else None

    def assignments(self):
        """Yield (stage, ce, tile) for every busy slot, in stage order."""
        for s in range(1, self.num_stages + 1):
            for j in self.active_ces(s):
                yield s, j, s - j + 1


def pipeline_schedule(tiles: Sequence[int], tile_elements=None) -> Schedule:
    tiles = tuple(int(t) for t in tiles)
    if not tiles:
        raise ValueError("pipeline needs at least one CE")
    if any(t < 1 for t in tiles):
        raise ValueError("zero tile count")
    return Schedule(tiles, tuple(tuple(e) for e in tile_elements) if tile_elements else ())


def _as_per_tile(tile_lat, schedule):
    """Normalise per-CE scalars or sequences to a list of per-tile latency lists."""
    out = []
    for j, t in enumerate(schedule.tiles):
        v = tile_lat[j]
        if np.ndim(v) == 0:
            out.append(None)
        else:
            if len(v) != t:
                raise ValueError(f"CE {j + 1}: {len(v)} tile latencies for {t} tiles")
            out.append([int(x) for x in v])
    return out


def pipelined_block_latency(tile_lat, schedule: Schedule) -> int:
    """Sum over stages of the slowest active CE's tile latency.

    ``tile_lat[j]`` is either one latency shared by all tiles of CE j+1 or a
    per-tile sequence.
    """
    per_tile = _as_per_tile(tile_lat, schedule)
    if all(p is None for p in per_tile):
        return int(kernels.stage_maxima(np.asarray(tile_lat, dtype=np.int64), schedule.tiles).sum())
    stage_max = [0] * schedule.num_stages
    for s, j, t in schedule.assignments():
        v = per_tile[j - 1][t - 1] if per_tile[j - 1] is not None else int(tile_lat[j - 1])
        if v > stage_max[s - 1]:
            stage_max[s - 1] = v
    return sum(stage_max)


def ce_busy_cycles(tile_lat, schedule: Schedule) -> list[int]:
    """Per-CE sum of tile latencies over its active stages."""
    per_tile = _as_per_tile(tile_lat, schedule)
    return [sum(p) if p is not None else int(tile_lat[j]) * schedule.tiles[j]
            for j, p in enumerate(per_tile)]


def pipelined_block_throughput(tile_lat, schedule: Schedule, clock_hz: int) -> Fraction:
    """Inputs per second, limited by the busiest CE."""
    return Fraction(clock_hz, max(ce_busy_cycles(tile_lat, schedule)))


# ---------------------------------------------------------------------------
# on-chip buffers


def single_ce_buffer(fms_sizes, weights_tile_sizes) -> int:
    """Largest layer FMs (IFM + OFM + live residual copies) plus the largest weights tile."""
    return int(max(fms_sizes)) + int(max(weights_tile_sizes))


def pipelined_buffer(weights_sizes, fm_buffer_sizes) -> int:
    """All pipelined weights on-chip plus double-buffered FM tiles."""
    return int(sum(weights_sizes)) + 2 * int(sum(fm_buffer_sizes))


# ---------------------------------------------------------------------------
# off-chip accesses


@dataclass(frozen=True)
class Access:
    weights: int = 0
    fms: int = 0

    @property
    def total(self) -> int:
        return self.weights + self.fms

    def __add__(self, other):
        return Access(self.weights + other.weights, self.fms + other.fms)


def streaming_options(ifms: int, weights: int, ifm_buffer: int, weights_buffer: int) -> tuple[Access, Access]:
    """The two ways to read a layer whose IFMs live off-chip.

    input-reuse: each IFM chunk is loaded once and all weights stream past it.
    weight-reuse: each weights chunk is loaded once and the IFMs stream past it.
    """
    input_reuse = Access(weights=weights * _ceil(ifms, ifm_buffer), fms=ifms)
    weight_reuse = Access(weights=weights, fms=ifms * _ceil(weights, weights_buffer))
    return input_reuse, weight_reuse


def single_ce_layer_accesses(ifms: int, ofms: int, weights: int, ifm_off: bool, ofm_off: bool,
                             ifm_buffer: int = 0, weights_buffer: int = 0) -> Access:
    acc = Access(fms=ofms if ofm_off else 0)
    if ifm_off:
        a, b = streaming_options(ifms, weights, ifm_buffer, weights_buffer)
        acc = acc + (a if a.total <= b.total else b)
    else:
        acc = acc + Access(weights=weights)
    return acc


def single_ce_accesses(layers, ifm_off, ofm_off, ifm_buffer=0, weights_buffer=0, ce_buffer=None):
    """Total and per-layer accesses of a single-CE block.

    When ``ce_buffer`` is given, the streaming buffers plus the largest
    on-chip OFM must fit in it.
    """
    if ce_buffer is not None and any(ifm_off):
        resident_ofm = max((l.ofms_bytes for l, off in zip(layers, ofm_off) if not off), default=0)
        if weights_buffer + ifm_buffer + resident_ofm > ce_buffer:
            raise ValueError("streaming buffers and resident OFMs exceed the CE buffer")
    per_layer = [single_ce_layer_accesses(l.ifms_bytes, l.ofms_bytes, l.weights_bytes, fi, fo,
                                          ifm_buffer, weights_buffer)
                 for l, fi, fo in zip(layers, ifm_off, ofm_off)]
    total = Access()
    for a in per_layer:
        total = total + a
    return total, per_layer


def pipelined_accesses(weights_sizes, resident, schedule: Schedule) -> tuple[Access, list[int]]:
    """Weights load once if kept on-chip, otherwise once per active stage; FMs stay on-chip."""
    per_ce = []
    for j, (w, keep) in enumerate(zip(weights_sizes, resident), start=1):
        stages = len(schedule.active_stages(j))
        per_ce.append(int(w) if keep else int(w) * stages)
    return Access(weights=sum(per_ce)), per_ce


@dataclass(frozen=True)
class BlockMetrics:
    latency_cycles: int
    period_cycles: int  # busiest-CE time; equals latency for a single CE
    buffer_bytes: int
    access: Access
    underutilization: tuple[Fraction, ...] = ()

    def throughput(self, clock_hz: int) -> Fraction:
        return Fraction(clock_hz, self.period_cycles)

    @property
    def access_bytes(self) -> int:
        return self.access.total
