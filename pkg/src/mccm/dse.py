"""Design-space exploration over multiple-CE accelerator shapes.

Families:

    Segmented       k single-CE blocks over MAC-balanced layer ranges
    SegmentedRR     one pipelined block of k CEs, round-robin over all layers
    Hybrid          k-1 pipelined CEs (one layer each) then one CE for the rest
    Custom          optional pipelined prefix, then single-CE segments at random cuts
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .composer import evaluate
from .descriptors import CnnModel, FpgaPlatform
from .errors import InfeasibleDesign
from .notation import AcceleratorSketch, BlockSketch, format_accelerator

SEGMENTED = "Segmented"
SEGMENTED_RR = "SegmentedRR"
HYBRID = "Hybrid"
CUSTOM = "CustomHybridFirstSegmentedRest"
BASELINE_FAMILIES = (SEGMENTED, SEGMENTED_RR, HYBRID)
FAMILIES = BASELINE_FAMILIES + (CUSTOM,)

# objective name -> (report field, natural direction)
OBJECTIVES = {
    "latency": ("latency_s", "min"),
    "throughput": ("throughput", "max"),
    "buffer": ("buffer_bytes", "min"),
    "accesses": ("access_bytes", "min"),
}
TIE_FRACTION = 0.10


@dataclass(frozen=True)
class DesignSpaceConfig:
    ce_count_range: tuple[int, int] = (2, 11)
    families: tuple[str, ...] = FAMILIES
    sample_size: int = 1000
    rng_seed: int = 0
    objectives: tuple[tuple[str, str], ...] = (("throughput", "max"), ("buffer", "min"))
    prefix_len: int | None = None

    def __post_init__(self):
        lo, hi = self.ce_count_range
        if lo < 2:
            raise ValueError("ce_count_range must start at 2 or more")
        if hi < lo:
            raise ValueError("empty ce_count_range")
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"unknown family {f!r}")
        if len(self.objectives) != 2:
            raise ValueError("exactly two objectives are required")
        for name, direction in self.objectives:
            if name not in OBJECTIVES:
                raise ValueError(f"unknown objective {name!r}")
            if direction not in ("min", "max"):
                raise ValueError(f"objective direction must be min or max, got {direction!r}")
        if self.sample_size < 0:
            raise ValueError("negative sample_size")
        if self.prefix_len is not None and (self.prefix_len < 0 or self.prefix_len == 1):
            raise ValueError("prefix_len must be 0 or at least 2 (a one-layer prefix is a plain segment)")

    @classmethod
    def from_dict(cls, doc: dict) -> DesignSpaceConfig:
        kw = {}
        if "ce_count_range" in doc:
            kw["ce_count_range"] = tuple(int(x) for x in doc["ce_count_range"])
        if "families" in doc:
            fams = doc["families"]
            kw["families"] = FAMILIES if fams == "all" else tuple(fams)
        for key in ("sample_size", "rng_seed"):
            if key in doc:
                kw[key] = int(doc[key])
        if "objectives" in doc:
            objs = []
            for o in doc["objectives"]:
                if isinstance(o, str):
                    objs.append((o, OBJECTIVES[o][1]))
                else:
                    objs.append((o[0], o[1]))
            kw["objectives"] = tuple(objs)
        if doc.get("prefix_len") is not None:
            kw["prefix_len"] = int(doc["prefix_len"])
        return cls(**kw)


@dataclass(frozen=True)
class DesignPoint:
    index: int
    sketch: str
    family: str
    ce_count: int
    metrics: dict | None  # None when the design does not fit the platform
    error: str = ""
    eval_s: float = field(default=0.0, compare=False)

    @property
    def feasible(self) -> bool:
        return self.metrics is not None

    def value(self, objective: str) -> float:
        return self.metrics[OBJECTIVES[objective][0]]


# ---------------------------------------------------------------------------
# families


def balanced_cuts(macs, parts: int) -> list[int]:
    """Last layer (1-based) of each of ``parts`` contiguous ranges with balanced MAC sums.

    Greedy over prefix sums: range k closes at the first layer whose prefix
    reaches k/parts of the total, keeping at least one layer per range.
    """
    macs = np.asarray(macs, dtype=np.float64)
    n = len(macs)
    if parts > n:
        raise ValueError(f"cannot split {n} layers into {parts} segments")
    prefix = np.cumsum(macs)
    total = prefix[-1]
    cuts = []
    prev = 0
    for k in range(1, parts):
        target = total * k / parts
        hi = n - (parts - k)  # leave a layer for each remaining range
        c = int(np.searchsorted(prefix, target, side="left")) + 1
        if c > 1 and abs(prefix[c - 2] - target) <= abs(prefix[c - 1] - target):
            c -= 1
        c = min(max(c, prev + 1), hi)
        cuts.append(c)
        prev = c
    cuts.append(n)
    return cuts


def _segments_sketch(cuts, first_layer=1, first_ce=1, prefix=()) -> AcceleratorSketch:
    blocks = list(prefix)
    lo, ce = first_layer, first_ce
    for c in cuts:
        blocks.append(BlockSketch(lo, c, ce, ce))
        lo, ce = c + 1, ce + 1
    last = blocks[-1]
    blocks[-1] = BlockSketch(last.layer_lo, last.layer_hi, last.ce_lo, last.ce_hi, hi_is_last=True)
    return AcceleratorSketch(tuple(blocks), len(blocks) > 1)


def enumerate_family(family: str, ce_count: int, cnn: CnnModel) -> AcceleratorSketch:
    n = len(cnn)
    if ce_count < 1:
        raise ValueError("ce_count must be positive")
    if family == SEGMENTED:
        return _segments_sketch(balanced_cuts(cnn.arrays.macs, ce_count))
    if family == SEGMENTED_RR:
        if ce_count > n:
            raise ValueError(f"{ce_count} CEs exceed {n} layers")
        return AcceleratorSketch((BlockSketch(1, n, 1, ce_count, hi_is_last=True),), False)
    if family == HYBRID:
        if ce_count > n:
            raise ValueError(f"Hybrid with {ce_count} CEs needs at least {ce_count} layers, CNN has {n}")
        k = ce_count - 1
        head = BlockSketch(1, k, 1, k)
        tail = BlockSketch(k + 1, n, ce_count, ce_count, hi_is_last=True)
        return AcceleratorSketch((head, tail), True)
    raise ValueError(f"family {family!r} has no fixed shape; use sample_custom")


def baseline_points(config: DesignSpaceConfig, cnn: CnnModel, platform: FpgaPlatform,
                    inter_segment_pipelining: bool | None = None) -> list[DesignPoint]:
    """One point per (baseline family, CE count) in the configured range."""
    lo, hi = config.ce_count_range
    jobs = []
    for family in config.families:
        if family == CUSTOM:
            continue
        for k in range(lo, hi + 1):
            jobs.append((family, k, enumerate_family(family, k, cnn)))
    return [_evaluate_point(i, s, f, k, cnn, platform, inter_segment_pipelining)
            for i, (f, k, s) in enumerate(jobs)]


# ---------------------------------------------------------------------------
# custom sampling


def _prefix_lengths(ce_count: int, prefix_len: int | None) -> list[int]:
    """Pipelined prefix lengths for a CE count. One layer on one CE is an ordinary segment, so 1 is skipped."""
    if prefix_len is not None:
        return [prefix_len]
    return [0] + list(range(2, ce_count))


def custom_space_size(n_layers: int, ce_range: tuple[int, int], prefix_len: int | None = None) -> int:
    """Number of distinct custom sketches the sampler can produce."""
    lo, hi = ce_range
    total = 0
    for k in range(lo, hi + 1):
        for p in _prefix_lengths(k, prefix_len):
            rest_layers, rest_ces = n_layers - p, k - p
            if p > k - 1 or rest_ces < 1 or rest_layers < rest_ces:
                continue
            total += math.comb(rest_layers - 1, rest_ces - 1)
    return total


def sample_sketch(rng: np.random.Generator, n_layers: int, ce_range: tuple[int, int],
                  prefix_len: int | None = None) -> tuple[AcceleratorSketch, int]:
    """Draw one custom sketch: CE count, pipelined prefix length, then cut points.

    The prefix gives each of its CEs one layer. The remaining layers are split
    by a uniformly random set of cut points into single-CE segments.
    """
    lo, hi = ce_range
    hi = min(hi, n_layers)
    if lo > hi:
        raise ValueError("empty design space: more CEs than layers")
    for _ in range(1000):
        k = int(rng.integers(lo, hi + 1))
        choices = _prefix_lengths(k, prefix_len)
        p = choices[int(rng.integers(0, len(choices)))]
        rest_ces = k - p
        rest_layers = n_layers - p
        if rest_ces >= 1 and rest_layers >= rest_ces:
            break
    else:
        raise ValueError("empty design space under the prefix constraint")
    gaps = rng.choice(rest_layers - 1, size=rest_ces - 1, replace=False) if rest_ces > 1 else []
    cuts = sorted(p + 1 + int(g) for g in gaps) + [n_layers]
    prefix = [BlockSketch(1, p, 1, p)] if p else []
    sketch = _segments_sketch(cuts, first_layer=p + 1, first_ce=p + 1, prefix=prefix)
    return sketch, k


def _point_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _evaluate_point(index, sketch, family, k, cnn, platform, pipelining=None) -> DesignPoint:
    text = format_accelerator(sketch)
    t0 = time.perf_counter()
    try:
        report = evaluate(sketch, cnn, platform, inter_segment_pipelining=pipelining)
        metrics = report.summary()
        err = ""
    except InfeasibleDesign as e:
        metrics, err = None, str(e)
    return DesignPoint(index, text, family, k, metrics, err, time.perf_counter() - t0)


_WORKER: dict = {}


def _init_worker(cnn, platform):
    _WORKER["cnn"] = cnn
    _WORKER["platform"] = platform


def _custom_point(args) -> DesignPoint:
    index, seed, ce_range, prefix_len, cnn, platform = args
    if cnn is None:
        cnn, platform = _WORKER["cnn"], _WORKER["platform"]
    sketch, k = sample_sketch(_point_rng(seed, index), len(cnn), ce_range, prefix_len)
    return _evaluate_point(index, sketch, CUSTOM, k, cnn, platform)


def sample_custom(config: DesignSpaceConfig, cnn: CnnModel, platform: FpgaPlatform, jobs: int = 1):
    """Yield ``config.sample_size`` evaluated custom points in index order.

    Point i is drawn from a generator seeded by (rng_seed, i), so the stream
    does not depend on the number of workers.
    """
    n = config.sample_size
    if custom_space_size(len(cnn), config.ce_count_range, config.prefix_len) == 0:
        raise ValueError("empty design space under the given constraints")
    if jobs <= 1:
        for i in range(n):
            yield _custom_point((i, config.rng_seed, config.ce_count_range, config.prefix_len, cnn, platform))
        return
    args = ((i, config.rng_seed, config.ce_count_range, config.prefix_len, None, None) for i in range(n))
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(cnn, platform)) as pool:
        yield from pool.map(_custom_point, args, chunksize=max(1, min(256, n // (4 * jobs) or 1)))


# ---------------------------------------------------------------------------
# Pareto analysis


def _keyed(points, objectives):
    """(minimisation key tuple, point) for feasible points."""
    out = []
    for p in points:
        if not p.feasible:
            continue
        key = tuple(-p.value(o) if d == "max" else p.value(o) for o, d in objectives)
        out.append((key, p))
    return out


def dominates(a, b) -> bool:
    """``a`` dominates ``b`` for minimisation keys."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


@dataclass(frozen=True)
class ParetoFront:
    points: tuple[DesignPoint, ...]
    ties: tuple[tuple[int, int], ...]  # (kept index, dropped duplicate index)
    objectives: tuple[tuple[str, str], ...]


def pareto_front(points, objectives=(("throughput", "max"), ("buffer", "min"))) -> ParetoFront:
    """Non-dominated feasible points under two directed objectives.

    Points with identical objective values keep one representative (the
    lowest index); the others are listed as ties.
    """
    keyed = _keyed(points, objectives)
    if not keyed:
        return ParetoFront((), (), tuple(objectives))
    keyed.sort(key=lambda kp: (kp[0], kp[1].index))
    front, ties = [], []
    best_second = math.inf
    last_key = None
    for key, p in keyed:
        if last_key is not None and key == last_key:
            ties.append((front[-1].index, p.index))
            continue
        if key[1] < best_second:
            front.append(p)
            best_second = key[1]
            last_key = key
    return ParetoFront(tuple(front), tuple(ties), tuple(objectives))


def verify_front(front: ParetoFront, points) -> list[str]:
    """Quadratic dominance check; returns a list of violations (empty when the front is correct)."""
    keyed = _keyed(points, front.objectives)
    on_front = {p.index for p in front.points}
    key_of = {p.index: k for k, p in keyed}
    problems = []
    for p in front.points:
        for k, q in keyed:
            if dominates(k, key_of[p.index]):
                problems.append(f"front point {p.index} dominated by {q.index}")
    for k, q in keyed:
        if q.index in on_front:
            continue
        if not any(dominates(key_of[p.index], k) or key_of[p.index] == k for p in front.points):
            problems.append(f"excluded point {q.index} is not dominated by the front")
    return problems


def within_tie(a: float, b: float, fraction: float = TIE_FRACTION) -> bool:
    """True when ``a`` and ``b`` differ by at most ``fraction`` of the larger magnitude."""
    hi = max(abs(a), abs(b))
    return hi == 0 or abs(a - b) <= fraction * hi


def best_by_metric(points, objective: str, direction: str | None = None,
                   fraction: float = TIE_FRACTION) -> list[DesignPoint]:
    """Best point on one metric together with every point tied with it."""
    direction = direction or OBJECTIVES[objective][1]
    feasible = [p for p in points if p.feasible]
    if not feasible:
        return []
    pick = max if direction == "max" else min
    best = pick(feasible, key=lambda p: p.value(objective))
    return [p for p in feasible if within_tie(p.value(objective), best.value(objective), fraction)]


# ---------------------------------------------------------------------------


@dataclass
class ExploreResult:
    points: list[DesignPoint]
    front: ParetoFront
    space_size: int
    wall_s: float

    @property
    def mean_eval_ms(self) -> float:
        if not self.points:
            return 0.0
        return 1e3 * sum(p.eval_s for p in self.points) / len(self.points)

    @property
    def mean_wall_ms(self) -> float:
        return 1e3 * self.wall_s / len(self.points) if self.points else 0.0


def explore(config: DesignSpaceConfig, cnn: CnnModel, platform: FpgaPlatform, jobs: int = 1,
            baselines: bool = True) -> ExploreResult:
    t0 = time.perf_counter()
    points = baseline_points(config, cnn, platform) if baselines else []
    if CUSTOM in config.families and config.sample_size:
        offset = len(points)
        for p in sample_custom(config, cnn, platform, jobs):
            points.append(DesignPoint(p.index + offset, p.sketch, p.family, p.ce_count, p.metrics, p.error,
                                      p.eval_s))
    wall = time.perf_counter() - t0
    front = pareto_front(points, config.objectives)
    size = custom_space_size(len(cnn), config.ce_count_range, config.prefix_len)
    return ExploreResult(points, front, size, wall)


POINT_FIELDS = ("index", "sketch", "family", "ce_count", "latency_s", "throughput", "buffer_bytes",
                "access_bytes", "feasible")


def point_row(p: DesignPoint) -> list:
    m = p.metrics or {}
    return [p.index, p.sketch, p.family, p.ce_count,
            repr(m["latency_s"]) if m else "", repr(m["throughput"]) if m else "",
            m.get("buffer_bytes", ""), m.get("access_bytes", ""), int(p.feasible)]
