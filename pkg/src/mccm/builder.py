"""Materialise a sketch into a concrete accelerator.

Three decisions are made here, in order:

1. PEs are split across CEs in proportion to each CE's MAC workload.
2. Each CE picks a (filters, out_h, out_w) unroll that minimises the summed
   tiled-loop latency of the layers it runs.
3. On-chip memory is allocated. If the minimum-access layout does not fit,
   residency is given up step by step: pipelined weights first, then
   inter-segment buffers, then single-CE feature maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache

import numpy as np

from . import kernels
from .blocks import Access
from .descriptors import CnnModel, FpgaPlatform
from .errors import InfeasibleDesign
from .notation import AcceleratorSketch, format_accelerator, round_robin_passes

PIPELINE_TILE_ROWS = 1  # OFM rows per pipelined tile
DIMENSIONS = ("filters", "out_h", "out_w", "in_channels", "kernel_h", "kernel_w")


@dataclass(frozen=True)
class Parallelism:
    filters: int = 1
    out_h: int = 1
    out_w: int = 1
    in_channels: int = 1
    kernel_h: int = 1
    kernel_w: int = 1

    @property
    def factors(self) -> tuple[int, int, int]:
        return self.filters, self.out_h, self.out_w

    @property
    def product(self) -> int:
        return math.prod(getattr(self, d) for d in DIMENSIONS)

    def as_dict(self) -> dict:
        return {d: getattr(self, d) for d in DIMENSIONS}


@dataclass(frozen=True)
class ComputeEngine:
    id: int
    pe_count: int
    parallelism: Parallelism = Parallelism()
    assigned_layers: tuple[int, ...] = ()
    dataflow: str = "output_stationary"

    def __post_init__(self):
        if self.pe_count < 1:
            raise ValueError(f"CE{self.id}: pe_count must be >= 1")
        if self.parallelism.product > self.pe_count:
            raise ValueError(f"CE{self.id}: parallelism {self.parallelism.product} exceeds {self.pe_count} PEs")


@dataclass(frozen=True)
class Block:
    """A materialised block: single-CE (one pass) or pipelined (one pass per round)."""

    index: int
    pipelined: bool
    ce_ids: tuple[int, ...]
    passes: tuple[tuple[int, ...], ...]

    @cached_property
    def layers(self) -> tuple[int, ...]:
        return tuple(l for p in self.passes for l in p)

    def ce_of(self, layer: int) -> int:
        if not self.pipelined:
            return self.ce_ids[0]
        for p in self.passes:
            if layer in p:
                return self.ce_ids[p.index(layer)]
        raise KeyError(layer)


@dataclass(frozen=True)
class LayerResidency:
    ifms_off_chip: bool = False
    ofms_off_chip: bool = False
    weights_resident_after_first_load: bool = True
    tile_rows: int = 0  # pipelined layers only
    tiles: int = 1
    fm_tile_bytes: int = 0
    residual_reload_bytes: int = 0  # residual copies re-read from off-chip by this layer


@dataclass(frozen=True)
class CeBuffer:
    weights_buffer_bytes: int = 0
    ifm_buffer_bytes: int = 0
    fm_tile_buffer_bytes: int = 0  # doubled FM tile for pipelined CEs
    total_bytes: int = 0


@dataclass(frozen=True)
class Boundary:
    """Data handed from one segment to the next."""

    after_layer: int
    size: int
    group: int
    on_chip: bool = True
    # off-chip traffic; a spilled neighbour layer already moves the OFM part itself
    store_bytes: int = 0
    load_bytes: int = 0

    @property
    def access_bytes(self) -> int:
        return self.store_bytes + self.load_bytes


@dataclass(frozen=True)
class BufferGroup:
    """Boundaries sharing one physical buffer; ``copies`` is 2 when double-buffered."""

    copies: int
    members: tuple[int, ...]  # boundary positions


@dataclass(frozen=True)
class BufferAllocation:
    ce: dict
    block_bytes: tuple[int, ...]
    boundaries: tuple[Boundary, ...]
    groups: tuple[BufferGroup, ...]
    layers: tuple[LayerResidency, ...]
    streaming_bytes: dict = field(default_factory=dict)  # block -> weights+IFM streaming space
    full_fit: bool = True
    spills: tuple[str, ...] = ()

    @property
    def group_bytes(self) -> tuple[int, ...]:
        out = []
        for g in self.groups:
            sizes = [self.boundaries[m].size for m in g.members if self.boundaries[m].on_chip]
            out.append(g.copies * max(sizes, default=0))
        return tuple(out)

    @property
    def total_bytes(self) -> int:
        return sum(self.block_bytes) + sum(self.group_bytes)

    def layer(self, index: int) -> LayerResidency:
        return self.layers[index - 1]


@dataclass(frozen=True)
class Accelerator:
    sketch: AcceleratorSketch
    cnn: CnnModel = field(repr=False)
    platform: FpgaPlatform
    ces: tuple[ComputeEngine, ...]
    blocks: tuple[Block, ...]
    buffers: BufferAllocation | None = None

    def ce(self, ce_id: int) -> ComputeEngine:
        for c in self.ces:
            if c.id == ce_id:
                return c
        raise KeyError(ce_id)

    @property
    def segments(self) -> list[tuple[int, int, tuple[int, ...]]]:
        """(block index, pass index, layers) for every segment in execution order."""
        return [(b.index, p, layers) for b in self.blocks for p, layers in enumerate(b.passes)]


# ---------------------------------------------------------------------------
# structure


def materialize_blocks(sketch: AcceleratorSketch) -> tuple[Block, ...]:
    blocks = []
    for i, bs in enumerate(sketch.blocks):
        if bs.layer_hi is None:
            raise ValueError("sketch has an unresolved 'Last'; parse it with the CNN")
        if bs.pipelined:
            blocks.append(Block(i, True, tuple(bs.ce_ids), tuple(round_robin_passes(bs))))
        else:
            blocks.append(Block(i, False, (bs.ce_lo,), (tuple(bs.layers),)))
    return tuple(blocks)


def _ce_layers(blocks) -> dict[int, tuple[int, ...]]:
    out: dict[int, list[int]] = {}
    for b in blocks:
        for p in b.passes:
            for pos, layer in enumerate(p):
                out.setdefault(b.ce_ids[pos] if b.pipelined else b.ce_ids[0], []).append(layer)
    for b in blocks:
        for c in b.ce_ids:
            out.setdefault(c, [])
    return {c: tuple(v) for c, v in out.items()}


# ---------------------------------------------------------------------------
# PEs


def largest_remainder(total: int, weights) -> list[int]:
    """Integer shares of ``total`` proportional to ``weights``, clamped to >= 1."""
    n = len(weights)
    if n > total:
        raise InfeasibleDesign(f"insufficient PEs: {n} CEs but only {total} PEs")
    wsum = sum(weights)
    quotas = [Fraction(total * w, wsum) for w in weights]
    shares = [int(q) for q in quotas]
    left = total - sum(shares)
    order = sorted(range(n), key=lambda i: (-(quotas[i] - shares[i]), i))
    for i in order[:left]:
        shares[i] += 1
    shares = [max(1, s) for s in shares]
    while sum(shares) > total:
        k = max(range(n), key=lambda i: (shares[i], -i))
        shares[k] -= 1
    return shares


def distribute_pes(sketch: AcceleratorSketch, cnn: CnnModel, platform: FpgaPlatform) -> dict[int, int]:
    blocks = materialize_blocks(sketch)
    ce_layers = _ce_layers(blocks)
    ids = sorted(ce_layers)
    macs = cnn.arrays.macs
    work = [int(sum(macs[l - 1] for l in ce_layers[c])) or 1 for c in ids]
    return dict(zip(ids, largest_remainder(platform.pe_count, work)))


# ---------------------------------------------------------------------------
# parallelism


@lru_cache(maxsize=65536)
def _search(dims: tuple, pe: int) -> tuple[int, int, int]:
    F, OH, OW, R = (np.array(x, dtype=np.int64) for x in zip(*dims))
    cf = kernels.candidate_factors(F, pe)
    ch = kernels.candidate_factors(OH, pe)
    cw = kernels.candidate_factors(OW, pe)
    a, b, c, _ = kernels.best_parallelism(F, OH, OW, R, cf, ch, cw, pe)
    return a, b, c


def select_parallelism(ce: ComputeEngine, layers, tile_rows: int | None = None) -> Parallelism:
    """Unroll over filters and OFM rows/columns minimising summed layer latency.

    With ``tile_rows`` the layers are processed as row tiles of that height
    (pipelined CEs), so the row unroll only sees one tile and the tile count
    multiplies the per-tile cost.
    """
    if not layers or ce.pe_count == 1:
        return Parallelism()
    if tile_rows is None:
        dims = tuple(sorted((l.num_filters, l.ofm_h, l.ofm_w, l.reduction_depth * l.kernel_h * l.kernel_w)
                            for l in layers))
    else:
        dims = tuple(sorted((l.num_filters, min(tile_rows, l.ofm_h), l.ofm_w,
                             -(-l.ofm_h // tile_rows) * l.reduction_depth * l.kernel_h * l.kernel_w)
                            for l in layers))
    a, b, c = _search(dims, ce.pe_count)
    return Parallelism(filters=a, out_h=b, out_w=c)


# ---------------------------------------------------------------------------
# buffers


def boundary_groups(blocks, segments, cnn: CnnModel, inter_segment_pipelining: bool):
    """Boundaries between consecutive segments and how they share buffers."""
    arr = cnn.arrays
    bounds = []
    group_of = []
    block_groups: dict[int, int] = {}
    groups: list[list] = []
    for k in range(len(segments) - 1):
        blk, _, layers = segments[k]
        nxt_blk = segments[k + 1][0]
        last = layers[-1]
        size = int(arr.ofms[last - 1] + arr.crossing[last - 1])
        if not inter_segment_pipelining:
            key, copies = ("all", 1)
        elif blk != nxt_blk:
            key, copies = (("edge", k), 2)
        else:
            key, copies = (("rr", blk), 1)
        if key not in block_groups:
            block_groups[key] = len(groups)
            groups.append([copies, []])
        g = block_groups[key]
        groups[g][1].append(k)
        bounds.append(Boundary(after_layer=last, size=size, group=g))
        group_of.append(g)
    return bounds, [BufferGroup(c, tuple(m)) for c, m in groups]


class _Layout:
    """Mutable working state of the allocator."""

    def __init__(self, acc: Accelerator):
        self.acc = acc
        cnn = acc.cnn
        self.arr = arr = cnn.arrays
        self.n = len(cnn)
        self.blocks = acc.blocks
        self.segments = acc.segments
        self.pf = np.ones(self.n, dtype=np.int64)
        self.ph = np.ones(self.n, dtype=np.int64)
        self.pipelined = np.zeros(self.n, dtype=bool)
        self.block_of = np.zeros(self.n, dtype=np.int64)
        for b in self.blocks:
            for l in b.layers:
                par = acc.ce(b.ce_of(l)).parallelism
                self.pf[l - 1] = par.filters
                self.ph[l - 1] = par.out_h
                self.pipelined[l - 1] = b.pipelined
                self.block_of[l - 1] = b.index
        self.wtile = np.minimum(self.pf, arr.filters) * arr.per_filter_weights
        self.tile_rows = np.minimum(PIPELINE_TILE_ROWS, arr.out_h)
        self.tiles = -(-arr.out_h // self.tile_rows)
        self.fm_tile = self.tile_rows * arr.ofms // arr.out_h
        self.resident = self.pipelined.copy()
        self.bounds, self.groups = boundary_groups(self.blocks, self.segments, cnn,
                                                   acc.sketch.inter_segment_pipelining)
        self.bound_on = [True] * len(self.bounds)
        # residual copies of single-CE sources may follow their OFM off-chip; consumers then reload them
        last_use: dict[int, int] = {}
        self.consumers: dict[int, list[int]] = {}
        for layer in cnn.layers:
            for src in layer.residual_sources:
                last_use[src] = max(last_use.get(src, 0), layer.index)
                self.consumers.setdefault(src, []).append(layer.index)
        self.spillable_sources = [(s, c, int(arr.ofms[s - 1])) for s, c in sorted(last_use.items())
                                  if c > s and not self.pipelined[s - 1]]
        src = self.spillable_sources
        self._src_idx = np.array([s - 1 for s, _, _ in src], dtype=np.int64)
        self._src_hi = np.array([c for _, c, _ in src], dtype=np.int64)
        self._src_size = np.array([z for _, _, z in src], dtype=np.int64)
        pairs = [(k, l - 1) for k, (s, _, _) in enumerate(src) for l in self.consumers[s]]
        self._cons_src = np.array([k for k, _ in pairs], dtype=np.int64)
        self._cons_layer = np.array([l for _, l in pairs], dtype=np.int64)
        # boundary k holds copy j of a spilled source when s_j < after_layer_k < c_j
        after = np.array([b.after_layer for b in self.bounds], dtype=np.int64)
        self._b_after = after
        self._b_base = np.array([b.size for b in self.bounds], dtype=np.int64)
        src_lo = self._src_idx + 1
        self._b_cross = ((src_lo[None, :] < after[:, None]) & (after[:, None] < self._src_hi[None, :])).astype(np.int64)
        self._b_ofm = arr.ofms[after - 1] if len(after) else np.zeros(0, dtype=np.int64)
        self.singles = [(b, np.asarray(b.layers) - 1) for b in self.blocks if not b.pipelined]
        self.split_cache: dict = {}
        # single-CE layers concatenated block by block, for segment-wise reductions
        if self.singles:
            self.s_idx = np.concatenate([idx for _, idx in self.singles])
            lengths = np.array([len(idx) for _, idx in self.singles])
        else:
            self.s_idx = np.zeros(0, dtype=np.int64)
            lengths = np.zeros(0, dtype=np.int64)
        self.s_lengths = lengths
        self.s_starts = (np.cumsum(lengths) - lengths).astype(np.int64)
        self.s_same_prev = np.ones(len(self.s_idx), dtype=bool)
        self.s_same_prev[self.s_starts] = False
        self.s_full = np.array([self.single_block_full(b) for b, _ in self.singles], dtype=np.int64)
        self.s_floor = np.array([int(self.wtile[idx].max() + arr.ifm_row_band[idx].max())
                                 for _, idx in self.singles], dtype=np.int64)

    def residual_terms(self, ofm_off) -> tuple[np.ndarray, np.ndarray]:
        """On-chip residual bytes per layer and reload bytes per layer under ``ofm_off``."""
        reload = np.zeros(self.n, dtype=np.int64)
        if not len(self._src_idx):
            return self.arr.residual_live.copy(), reload
        size = np.where(ofm_off[self._src_idx], self._src_size, 0)
        delta = np.zeros(self.n + 1, dtype=np.int64)
        np.subtract.at(delta, self._src_idx + 1, size)
        np.add.at(delta, self._src_hi, size)
        live = self.arr.residual_live + np.cumsum(delta)[:self.n]
        np.add.at(reload, self._cons_layer, size[self._cons_src])
        return live, reload

    def boundary_sizes(self, ofm_off) -> np.ndarray:
        """Boundary sizes without the residual copies that already live off-chip."""
        if not len(self._b_base) or not len(self._src_idx):
            return self._b_base.copy()
        return self._b_base - self._b_cross @ np.where(ofm_off[self._src_idx], self._src_size, 0)

    def boundary_traffic(self, ifm_off, ofm_off) -> list[tuple[int, int, int]]:
        """(size, store bytes, load bytes) per boundary.

        An off-chip boundary is written once and read once. When the layer
        before it already writes its OFM off-chip, or the layer after it
        streams its IFM from off-chip, that part of the boundary is not
        moved a second time.
        """
        sizes, store, load = self.boundary_moves(ifm_off, ofm_off)
        return list(zip(sizes.tolist(), store.tolist(), load.tolist()))

    def boundary_moves(self, ifm_off, ofm_off):
        sizes = self.boundary_sizes(ofm_off)
        off = ~np.asarray(self.bound_on, dtype=bool)
        a = self._b_after
        store = np.where(off, sizes - np.where(ofm_off[a - 1], self._b_ofm, 0), 0)
        load = np.where(off, sizes - np.where(ifm_off[a], self._b_ofm, 0), 0)
        return sizes, store, load

    # requirement pieces -------------------------------------------------

    def pipelined_block_bytes(self, b: Block) -> int:
        best = 0
        for p in b.passes:
            idx = np.asarray(p) - 1
            w = np.where(self.resident[idx], self.arr.weights[idx], self.wtile[idx])
            best = max(best, int(w.sum() + 2 * self.fm_tile[idx].sum()))
        return best

    def single_block_full(self, b: Block) -> int:
        idx = np.asarray(b.layers) - 1
        return int(self.arr.fms[idx].max() + self.wtile[idx].max())

    def group_bytes(self) -> int:
        total = 0
        for g in self.groups:
            sizes = [self.bounds[m].size for m in g.members if self.bound_on[m]]
            total += g.copies * max(sizes, default=0)
        return total

    def other_bytes(self) -> int:
        return sum(self.pipelined_block_bytes(b) for b in self.blocks if b.pipelined) + self.group_bytes()

    def full_bytes(self) -> int:
        return self.other_bytes() + sum(self.single_block_full(b) for b in self.blocks if not b.pipelined)

    def min_working_set(self) -> int:
        """Bytes every block needs at once with all weights tiled and all optional buffers off-chip."""
        tiled = 0
        for b in self.blocks:
            if b.pipelined:
                tiled += max(int(self.wtile[np.asarray(p) - 1].sum() + 2 * self.fm_tile[np.asarray(p) - 1].sum())
                             for p in b.passes)
        return tiled + int(self.s_floor.sum())


def _flags_for(spilled: np.ndarray, lay: _Layout) -> tuple[np.ndarray, np.ndarray]:
    """IFM/OFM off-chip flags implied by spilling whole single-CE layers.

    A spilled layer reads its IFM from and writes its OFM to off-chip memory,
    so its predecessor in the block writes off-chip and its successor reads
    from off-chip.
    """
    ifm_off = np.zeros(len(spilled), dtype=bool)
    ofm_off = np.zeros(len(spilled), dtype=bool)
    m = spilled[lay.s_idx]
    i = m.copy()
    i[1:] |= m[:-1] & lay.s_same_prev[1:]
    o = m.copy()
    o[:-1] |= m[1:] & lay.s_same_prev[1:]
    ifm_off[lay.s_idx] = i
    ofm_off[lay.s_idx] = o
    return ifm_off, ofm_off


def _max_streaming(budget_left: int, fixed: list[int], extra: list[int], floors: list[int]) -> list[int] | None:
    """Per-block streaming space max(X, floor_b) for the largest X that fits, or None.

    Block b costs max(fixed_b, max(X, floor_b) + extra_b); the total must stay
    within ``budget_left``. The total is continuous and piecewise linear in X,
    so the largest X is found by locating the last breakpoint that fits and
    solving on the linear piece after it.
    """
    parts = list(zip(fixed, extra, floors))

    def cost(x):
        return sum(max(f, max(x, m) + e) for f, e, m in parts)

    lo = min(floors)
    if cost(lo) > budget_left:
        return None
    hi = max(lo, budget_left)
    knots = sorted({v for f, e, m in parts for v in (m, f - e) if lo < v <= hi})
    base = lo
    for v in knots:
        if cost(v) > budget_left:
            break
        base = v
    slope = sum(1 for f, e, m in parts if base >= m and base + e >= f)
    x = hi if slope == 0 else min(hi, base + (budget_left - cost(base)) // slope)
    return [max(x, m) for m in floors]


_RATIO_NUM = np.arange(1, 9, dtype=np.int64)


def _best_split(idx, ifm_off, ofm_off, space, arr) -> tuple[Access, int, int]:
    """Cheapest of the eight weights/IFM splits of ``space`` for the layers ``idx``.

    Vectorised form of summing ``single_ce_layer_accesses`` per split; the
    first split reaching the minimum wins.
    """
    wbuf = np.maximum(1, _RATIO_NUM * space // 9)
    ibuf = np.maximum(1, space - wbuf)
    ifms, ofms, w = arr.ifms[idx], arr.ofms[idx], arr.weights[idx]
    off = ifm_off[idx]
    fixed_fms = int((ofms * ofm_off[idx]).sum())
    on_w = int(w[~off].sum())
    ifms, w = ifms[off], w[off]
    is_w = w[None, :] * (-(-ifms[None, :] // ibuf[:, None]))
    ws_f = ifms[None, :] * (-(-w[None, :] // wbuf[:, None]))
    pick_is = is_w + ifms[None, :] <= ws_f + w[None, :]
    weights = np.where(pick_is, is_w, w[None, :]).sum(axis=1) + on_w
    fms = np.where(pick_is, ifms[None, :], ws_f).sum(axis=1) + fixed_fms
    k = int(np.argmin(weights + fms))
    return Access(weights=int(weights[k]), fms=int(fms[k])), int(wbuf[k]), int(ibuf[k])


def _evaluate_spill(lay: _Layout, spilled: np.ndarray, budget: int, other: int):
    """Buffer split and accesses for one set of spilled single-CE layers, or None if it cannot fit."""
    arr = lay.arr
    ifm_off, ofm_off = _flags_for(spilled, lay)
    res_live, reload = lay.residual_terms(ofm_off)
    S, starts = lay.s_idx, lay.s_starts
    stream = ifm_off[S]
    ofm_keep = np.where(ofm_off[S], 0, arr.ofms[S])
    kept = ofm_keep + res_live[S]
    need = arr.ifms[S] + kept + lay.wtile[S]
    streaming = np.logical_or.reduceat(stream, starts)
    touched = streaming | np.logical_or.reduceat(ofm_off[S], starts)
    fixed = np.maximum.reduceat(np.where(stream, 0, need), starts)
    fixed_all = int(lay.s_full[~touched].sum() + fixed[touched & ~streaming].sum())
    left = budget - other - fixed_all
    if left < 0:
        return None
    sb = np.flatnonzero(streaming)
    fixed_s = fixed[sb].tolist()
    extra_s = np.maximum.reduceat(np.where(stream, kept, 0), starts)[sb].tolist()
    space = {}
    if len(sb):
        xs = _max_streaming(left, fixed_s, extra_s, lay.s_floor[sb].tolist())
        if xs is None:
            return None
        space = {lay.singles[k][0].index: x for k, x in zip(sb.tolist(), xs)}
    layer_streams = np.repeat(streaming, lay.s_lengths)
    plain = S[~layer_streams]
    _, store, load = lay.boundary_moves(ifm_off, ofm_off)
    moved = int(store.sum() + load.sum())
    # the network's first IFM and last OFM move anyway; spilled end layers already count them
    moved += (0 if ifm_off[0] else int(arr.ifms[0])) + (0 if ofm_off[-1] else int(arr.ofms[-1]))
    total = Access(weights=int(arr.weights[plain].sum()),
                   fms=int(reload.sum() + (arr.ofms[plain] * ofm_off[plain]).sum()) + moved)
    ce_split = {}
    for k in sb.tolist():
        b, idx = lay.singles[k]
        key = (b.index, space[b.index], ifm_off[idx].tobytes(), ofm_off[idx].tobytes())
        if key not in lay.split_cache:
            lay.split_cache[key] = _best_split(idx, ifm_off, ofm_off, space[b.index], arr)
        acc, wbuf, ibuf = lay.split_cache[key]
        ce_split[b.index] = (wbuf, ibuf)
        total = total + acc
    block_bytes = {}
    for k, f, e in zip(sb.tolist(), fixed_s, extra_s):
        b = lay.singles[k][0]
        block_bytes[b.index] = max(f, space[b.index] + e)
    return total, ifm_off, ofm_off, space, ce_split, block_bytes, res_live, reload


def _plain_access(lay: _Layout) -> int:
    """Single-CE weights, boundary traffic and mandatory transfers with every FM kept on-chip.

    Same scale as ``_evaluate_spill`` totals, so the two can be compared.
    """
    none = np.zeros(lay.n, dtype=bool)
    _, store, load = lay.boundary_moves(none, none)
    arr = lay.arr
    return int(arr.weights[lay.s_idx].sum() + store.sum() + load.sum() + arr.ifms[0] + arr.ofms[-1])


class _SpillBound:
    """Lower bound on step-3 accesses that never decreases as layers are spilled.

    Counts single-CE weights, every IFM read and OFM write forced off-chip by
    the spilled layers and their block neighbours, and the part of each
    boundary and network end transfer that no flag can remove. Reload,
    residual and streaming overheads are all non-negative, so they are left out.
    """

    def __init__(self, lay: _Layout):
        arr = lay.arr
        self.ifms = arr.ifms.tolist()
        self.ofms = arr.ofms.tolist()
        self.ifm_off = [False] * lay.n
        self.ofm_off = [False] * lay.n
        S = lay.s_idx.tolist()
        same = lay.s_same_prev.tolist()
        self.prev = {S[j]: S[j - 1] for j in range(1, len(S)) if same[j]}
        self.next = {a: b for b, a in self.prev.items()}
        # removable parts: boundary store under the producer's OFM flag, load under the consumer's IFM flag
        self.on_ofm: dict[int, int] = {}
        self.on_ifm: dict[int, int] = {}
        for a, size in zip(lay._b_after.tolist(), lay._b_ofm.tolist()):
            self.on_ofm[a - 1] = self.on_ofm.get(a - 1, 0) + size
            self.on_ifm[a] = self.on_ifm.get(a, 0) + min(size, self.ifms[a])
        self.on_ifm[0] = self.on_ifm.get(0, 0) + self.ifms[0]
        self.on_ofm[lay.n - 1] = self.on_ofm.get(lay.n - 1, 0) + self.ofms[-1]
        self.value = int(arr.weights[lay.s_idx].sum()) + sum(self.on_ofm.values()) + sum(self.on_ifm.values())

    def _set_ifm(self, i):
        if not self.ifm_off[i]:
            self.ifm_off[i] = True
            self.value += self.ifms[i] - self.on_ifm.get(i, 0)

    def _set_ofm(self, i):
        if not self.ofm_off[i]:
            self.ofm_off[i] = True
            self.value += self.ofms[i] - self.on_ofm.get(i, 0)

    def spill(self, i) -> int:
        self._set_ifm(i)
        self._set_ofm(i)
        if i in self.prev:
            self._set_ofm(self.prev[i])
        if i in self.next:
            self._set_ifm(self.next[i])
        return self.value


def _first_fit(n: int, apply, fits) -> int:
    """Smallest m in 1..n with ``fits()`` after ``apply(m)``; leaves state at that m (or n)."""
    lo, hi = 1, n
    apply(n)
    if n == 0 or not fits():
        return n
    while lo < hi:
        mid = (lo + hi) // 2
        apply(mid)
        if fits():
            hi = mid
        else:
            lo = mid + 1
    apply(lo)
    return lo


def allocate_buffers(acc: Accelerator, budget: int | None = None) -> BufferAllocation:
    """Decide buffer sizes and data residency for a built accelerator.

    The minimum-access layout is used when it fits. Otherwise layouts are
    tried along a fixed spill order, and the fitting layout with the fewest
    accesses wins, so more memory never means more accesses.
    """
    budget = acc.platform.on_chip_bytes if budget is None else budget
    lay = _Layout(acc)
    arr = lay.arr
    if budget < lay.min_working_set():
        raise InfeasibleDesign(f"cannot allocate minimum working set: need {lay.min_working_set()} bytes, "
                               f"have {budget}")
    spills: list[str] = []
    full = lay.full_bytes() <= budget
    single_layers = [l for b in lay.blocks if not b.pipelined for l in b.layers]
    ifm_off = np.zeros(lay.n, dtype=bool)
    ofm_off = np.zeros(lay.n, dtype=bool)
    space: dict[int, int] = {}
    ce_split = {}
    stream_bytes = {}
    res_live, reload = arr.residual_live, np.zeros(lay.n, dtype=np.int64)

    if not full:
        # 1. pipelined weights stream per stage instead of staying resident
        order = sorted(np.flatnonzero(lay.pipelined) + 1, key=lambda l: (-int(arr.weights[l - 1]), l))

        def spill_weights(m):
            lay.resident[:] = lay.pipelined
            for l in order[:m]:
                lay.resident[l - 1] = False

        m = _first_fit(len(order), spill_weights, lambda: lay.full_bytes() <= budget)
        spills.extend(f"weights:L{l}" for l in order[:m])
        fits = m <= len(order) and lay.full_bytes() <= budget
        # 2. inter-segment buffers move off-chip
        if not fits:
            border = sorted(range(len(lay.bounds)), key=lambda m: (-lay.bounds[m].size, m))

            def spill_bounds(m):
                for k, b in enumerate(border):
                    lay.bound_on[b] = k >= m

            m = _first_fit(len(border), spill_bounds, lambda: lay.full_bytes() <= budget)
            bound_spills = [f"boundary:L{lay.bounds[b].after_layer}" for b in border[:m]]
            fits = lay.full_bytes() <= budget
            # 3. single-CE feature maps move off-chip, largest footprint first. Spilling a
            # residual source can undercut a fitting step-2 layout, so both are costed.
            kept = _plain_access(lay) if fits else None
            kept_state = list(lay.bound_on)
            spill_bounds(len(border))
            other = lay.other_bytes()
            need = arr.fms + lay.wtile
            order = sorted(single_layers, key=lambda l: (-int(need[l - 1]), l))
            best = None
            spilled = np.zeros(lay.n, dtype=bool)
            bound = _SpillBound(lay)
            for k, l in enumerate(order, start=1):
                spilled[l - 1] = True
                floor = bound.spill(l - 1)
                costs = [c for c in (kept, best[0].total if best else None) if c is not None]
                if costs and floor >= min(costs):
                    break
                res = _evaluate_spill(lay, spilled, budget, other)
                if res is None:
                    continue
                if best is None or res[0].total < best[0].total:
                    best = res + (k,)
            if best is not None and (kept is None or best[0].total < kept):
                _, ifm_off, ofm_off, space, ce_split, stream_bytes, res_live, reload, k = best
                spills.extend(f"boundary:L{lay.bounds[b].after_layer}" for b in border)
                spills.extend(f"fms:L{l}" for l in order[:k])
            elif kept is not None:
                lay.bound_on[:] = kept_state
                spills.extend(bound_spills)
            else:
                raise InfeasibleDesign(f"cannot allocate minimum working set within {budget} bytes")

    # final per-block and per-CE figures
    block_bytes = []
    ce_buf = {}
    for b in lay.blocks:
        if b.pipelined:
            block_bytes.append(lay.pipelined_block_bytes(b))
            for pos, c in enumerate(b.ce_ids):
                idx = np.array([p[pos] for p in b.passes if pos < len(p)]) - 1
                w = np.where(lay.resident[idx], arr.weights[idx], lay.wtile[idx])
                ce_buf[c] = CeBuffer(weights_buffer_bytes=int(w.max()),
                                     fm_tile_buffer_bytes=int(2 * lay.fm_tile[idx].max()),
                                     total_bytes=int(w.max() + 2 * lay.fm_tile[idx].max()))
        else:
            idx = np.asarray(b.layers) - 1
            if b.index in stream_bytes:
                nbytes = stream_bytes[b.index]
            elif ofm_off[idx].any():
                ofm_keep = np.where(ofm_off[idx], 0, arr.ofms[idx])
                nbytes = int((arr.ifms[idx] + ofm_keep + res_live[idx] + lay.wtile[idx]).max())
            else:
                nbytes = lay.single_block_full(b)
            block_bytes.append(nbytes)
            wbuf, ibuf = ce_split.get(b.index, (int(lay.wtile[idx].max()), 0))
            ce_buf[b.ce_ids[0]] = CeBuffer(weights_buffer_bytes=wbuf, ifm_buffer_bytes=ibuf, total_bytes=nbytes)

    residency = []
    for i in range(lay.n):
        if lay.pipelined[i]:
            residency.append(LayerResidency(weights_resident_after_first_load=bool(lay.resident[i]),
                                            tile_rows=int(lay.tile_rows[i]), tiles=int(lay.tiles[i]),
                                            fm_tile_bytes=int(lay.fm_tile[i]),
                                            residual_reload_bytes=int(reload[i])))
        else:
            residency.append(LayerResidency(ifms_off_chip=bool(ifm_off[i]), ofms_off_chip=bool(ofm_off[i]),
                                            weights_resident_after_first_load=False,
                                            residual_reload_bytes=int(reload[i])))
    bounds = tuple(Boundary(b.after_layer, size, b.group, on, store, load)
                   for b, on, (size, store, load) in zip(lay.bounds, lay.bound_on,
                                                         lay.boundary_traffic(ifm_off, ofm_off)))
    alloc = BufferAllocation(ce=ce_buf, block_bytes=tuple(block_bytes), boundaries=bounds,
                             groups=tuple(lay.groups), layers=tuple(residency), streaming_bytes=space,
                             full_fit=full, spills=tuple(spills))
    if alloc.total_bytes > budget:
        raise InfeasibleDesign(f"allocation of {alloc.total_bytes} bytes exceeds {budget}")
    return alloc


def full_fit_bytes(acc: Accelerator) -> int:
    """On-chip bytes needed for the minimum-access layout."""
    return _Layout(acc).full_bytes()


# ---------------------------------------------------------------------------


def build(sketch: AcceleratorSketch, cnn: CnnModel, platform: FpgaPlatform, budget: int | None = None) -> Accelerator:
    blocks = materialize_blocks(sketch)
    if blocks[-1].layers[-1] != len(cnn):
        raise ValueError("sketch does not cover the CNN")
    pes = distribute_pes(sketch, cnn, platform)
    ce_layers = _ce_layers(blocks)
    pipelined = {c for b in blocks if b.pipelined for c in b.ce_ids}
    ces = []
    for cid in sorted(pes):
        layer_objs = [cnn.layer(l) for l in ce_layers[cid]]
        proto = ComputeEngine(cid, pes[cid], assigned_layers=ce_layers[cid])
        rows = PIPELINE_TILE_ROWS if cid in pipelined else None
        ces.append(ComputeEngine(cid, pes[cid], select_parallelism(proto, layer_objs, rows), ce_layers[cid]))
    acc = Accelerator(sketch, cnn, platform, tuple(ces), blocks)
    return Accelerator(sketch, cnn, platform, tuple(ces), blocks, allocate_buffers(acc, budget))


def accelerator_to_dict(acc: Accelerator) -> dict:
    buf = acc.buffers
    out = {
        "sketch": format_accelerator(acc.sketch),
        "inter_segment_pipelining": acc.sketch.inter_segment_pipelining,
        "platform": acc.platform.name,
        "cnn": acc.cnn.name,
        "ces": [],
        "blocks": [],
    }
    for c in acc.ces:
        entry = {"id": c.id, "pe_count": c.pe_count, "dataflow": c.dataflow,
                 "parallelism": c.parallelism.as_dict(), "layers": list(c.assigned_layers)}
        if buf is not None and c.id in buf.ce:
            cb = buf.ce[c.id]
            entry["buffer"] = {"weights_buffer_bytes": cb.weights_buffer_bytes,
                               "ifm_buffer_bytes": cb.ifm_buffer_bytes,
                               "fm_tile_buffer_bytes": cb.fm_tile_buffer_bytes,
                               "total_bytes": cb.total_bytes}
        out["ces"].append(entry)
    for b in acc.blocks:
        out["blocks"].append({"index": b.index, "kind": "pipelined" if b.pipelined else "single",
                              "ces": list(b.ce_ids), "passes": [list(p) for p in b.passes],
                              "buffer_bytes": buf.block_bytes[b.index] if buf else None})
    if buf is not None:
        out["buffers"] = {
            "total_bytes": buf.total_bytes,
            "full_fit": buf.full_fit,
            "streaming_bytes": {str(k): v for k, v in buf.streaming_bytes.items()},
            "spills": list(buf.spills),
            "boundaries": [{"after_layer": b.after_layer, "size": b.size, "group": b.group, "on_chip": b.on_chip,
                            "store_bytes": b.store_bytes, "load_bytes": b.load_bytes}
                           for b in buf.boundaries],
            "groups": [{"copies": g.copies, "members": list(g.members)} for g in buf.groups],
            "layers": [{"layer": i + 1, "ifms_off_chip": r.ifms_off_chip, "ofms_off_chip": r.ofms_off_chip,
                        "weights_resident": r.weights_resident_after_first_load, "tiles": r.tiles,
                        "tile_rows": r.tile_rows, "fm_tile_bytes": r.fm_tile_bytes,
                        "residual_reload_bytes": r.residual_reload_bytes}
                       for i, r in enumerate(buf.layers)],
        }
    return out

