"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""

import random
import time
from fractions import Fraction

import numpy as np
import pytest

from mccm.blocks import pipeline_schedule, pipelined_block_latency, pipelined_block_throughput
from mccm.builder import build, full_fit_bytes
from mccm.composer import compose, evaluate
from mccm.descriptors import load_cnn, load_platform
from mccm.dse import (BASELINE_FAMILIES, CUSTOM, DesignSpaceConfig, baseline_points, enumerate_family, explore,
                      sample_sketch, verify_front)
from mccm.errors import InfeasibleDesign
from mccm.notation import format_accelerator, parse_accelerator
from mccm.sim import simulate

from conftest import BOARDS_BY_MEMORY, CNNS
from instances import random_cnn, random_platform, random_sketch


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail
    return emit


def _random_built(rng, compute_bound):
    while True:
        cnn = random_cnn(rng)
        sketch = random_sketch(rng, len(cnn))
        platform = random_platform(rng, compute_bound, on_chip=rng.choice((None, rng.randint(1, 60_000))))
        try:
            return build(sketch, cnn, platform)
        except InfeasibleDesign:
            continue


def test_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = random.Random(2024)
    shapes = set()
    exact_fail, tol_fail, n_exact, n_mem = [], [], 0, 0
    for i in range(250):
        acc = _random_built(rng, compute_bound=True)
        shapes.update("pipelined" if b.pipelined and len(b.passes) == 1 else
                      "roundrobin" if b.pipelined else "single" for b in acc.blocks)
        r, s = compose(acc), simulate(acc)
        n_exact += 1
        if (s.cycles, s.access_bytes, s.time_s) != (r.compute_cycles, r.access_bytes, r.latency_s):
            exact_fail.append(i)
    for i in range(250):
        acc = _random_built(rng, compute_bound=False)
        r, s = compose(acc), simulate(acc)
        n_mem += 1
        stage = max(Fraction(max(st), acc.platform.clock_hz) for st in s.stage_cycles)
        if (s.cycles, s.access_bytes) != (r.compute_cycles, r.access_bytes) or abs(s.time_s - r.latency_s) > stage:
            tol_fail.append(i)
    elapsed = time.perf_counter() - t0
    ok = not exact_fail and not tol_fail and elapsed < 120 and shapes == {"single", "pipelined", "roundrobin"}
    verdict(1, "oracle equivalence", ok,
            f"{n_exact} compute-bound exact, {n_mem} memory-bound within one stage, "
            f"{len(exact_fail) + len(tol_fail)} mismatches, {elapsed:.1f} s")


def test_access_floor(verdict):
    rows = []
    ok = True
    for name in CNNS:
        cnn = load_cnn(name)
        floor = cnn.total_weights * cnn.word_bytes + cnn.layer(1).ifms_bytes + cnn.layer(len(cnn)).ofms_bytes
        for family in BASELINE_FAMILIES:
            sketch = enumerate_family(family, 4, cnn)
            platform = load_platform("zcu102")
            need = full_fit_bytes(build(sketch, cnn, platform.with_(on_chip_bytes=1 << 40)))
            r = compose(build(sketch, cnn, platform.with_(on_chip_bytes=need)))
            ok &= r.full_fit and r.access_bytes == floor and r.access.weights == cnn.total_weights * cnn.word_bytes
        rows.append(f"{name} {cnn.total_weights / 1e6:.2f}M")
    verdict(2, "access floor at full fit", ok, "conv weights " + ", ".join(rows))


def test_throughput_latency_laws(verdict):
    s = pipeline_schedule([4, 4, 4])
    worked = pipelined_block_throughput([10, 30, 20], s, 1) * pipelined_block_latency([10, 30, 20], s)
    rng = random.Random(7)
    equal_fail = ge_fail = checked = 0
    for _ in range(300):
        acc = _random_built(rng, rng.random() < 0.5)
        r = compose(acc)
        checked += 1
        product = r.throughput * r.latency_s
        single_only = not any(b.kind == "pipelined" for b in r.blocks)
        if (single_only and len(r.blocks) == 1) or (not r.inter_segment_pipelining and len(r.blocks) > 1):
            equal_fail += product != 1
        for b in r.blocks:
            if b.kind == "pipelined":
                lat = sum((r.segments[k].effective_s for k in b.segments), Fraction(0))
                ge_fail += lat / b.period_s < 1
        ge_fail += product < 1
    resnet = load_cnn("resnet50")
    zc706 = load_platform("zc706")
    for k in range(2, 12):
        r = evaluate(enumerate_family("Segmented", k, resnet), resnet, zc706, inter_segment_pipelining=False)
        equal_fail += r.throughput * r.latency_s != 1
    ok = worked == Fraction(5, 4) and equal_fail == 0 and ge_fail == 0
    verdict(3, "throughput-latency laws", ok,
            f"worked example ratio {worked}, {checked} random designs, {equal_fail + ge_fail} violations")


def test_speed(verdict):
    cnn = load_cnn("xception")
    platform = load_platform("vcu110")
    evaluate(enumerate_family("Segmented", 4, cnn), cnn, platform)  # warm the JIT
    cfg = DesignSpaceConfig(families=(CUSTOM,), sample_size=1500, rng_seed=1)
    result = explore(cfg, cnn, platform, baselines=False)
    per_design = result.mean_wall_ms
    projected_min = per_design * 100_000 / 1000 / 60
    ok = per_design <= 10 and projected_min <= 20
    verdict(4, "evaluation speed", ok,
            f"{per_design:.2f} ms/design on XCeption/VCU110, 100k designs in about {projected_min:.1f} min")


def test_monotonic_across_boards(verdict):
    boards = [load_platform(b) for b in BOARDS_BY_MEMORY]
    rng = np.random.default_rng(5)
    violations, checked = [], 0
    for name in CNNS:
        cnn = load_cnn(name)
        sketches = [enumerate_family(f, k, cnn) for f in BASELINE_FAMILIES for k in (2, 5, 11)]
        sketches += [sample_sketch(rng, len(cnn), (2, 11))[0] for _ in range(12)]
        for sketch in sketches:
            last = None
            for board in boards:
                try:
                    r = compose(build(sketch, cnn, board))
                except InfeasibleDesign:
                    if last is not None:
                        violations.append((name, format_accelerator(sketch), board.name, "infeasible"))
                    continue
                if r.buffer_bytes > board.on_chip_bytes or (last is not None and r.access_bytes > last):
                    violations.append((name, format_accelerator(sketch), board.name))
                last = r.access_bytes
            checked += 1
    verdict(5, "monotonic accesses across boards", not violations,
            f"{checked} sketches x {len(boards)} boards, {len(violations)} violations")


def _corpus(cnn):
    out = ["{L1: CE1, L2-Last: CE2}", "{L1-L3: CE1-CE3, L4: CE4, L5-Last: CE5}",
           "{L1-L10: CE1, L11: CE2, L12-L53: CE3}", "{L1-Last: CE1-CE11}"]
    for k in range(2, 12):
        for f in BASELINE_FAMILIES:
            out.append(format_accelerator(enumerate_family(f, k, cnn)))
    rng = np.random.default_rng(9)
    while len(out) < 50:
        out.append(format_accelerator(sample_sketch(rng, len(cnn), (2, 11))[0]))
    return out


def test_notation_round_trip_and_baselines(verdict):
    cnn = load_cnn("resnet50")
    corpus = _corpus(cnn)
    bad = [t for t in corpus if format_accelerator(parse_accelerator(t, cnn)) != t
           or parse_accelerator(format_accelerator(parse_accelerator(t, cnn)), cnn) != parse_accelerator(t, cnn)]
    has_forms = any("Last" in t for t in corpus) and any("{L1: CE1" in t for t in corpus)
    points = baseline_points(DesignSpaceConfig(families=BASELINE_FAMILIES), cnn, load_platform("zc706"))
    ok = len(corpus) == 50 and not bad and has_forms and len(points) == 30
    verdict(6, "notation round trip and baseline count", ok,
            f"{len(corpus)} sketches, {len(bad)} mismatches, {len(points)} baseline points")


def test_bottleneck_shape(verdict):
    cnn = load_cnn("resnet50")
    platform = load_platform("zc706")
    rr = evaluate(enumerate_family("SegmentedRR", 2, cnn), cnn, platform)
    seg = evaluate(enumerate_family("Segmented", 7, cnn), cnn, platform)
    rr_bound = [s for s in rr.segments if s.memory_bound and s.idle_fraction > 0]
    seg_bound = [s for s in seg.segments if s.memory_bound]
    idle = sum((s.effective_s - s.compute_s for s in rr.segments), Fraction(0)) / sum(
        (s.effective_s for s in rr.segments), Fraction(0))
    ok = bool(rr_bound) and not seg_bound
    verdict(7, "memory-bound segments: SegmentedRR-2 yes, Segmented-7 no", ok,
            f"{len(rr_bound)}/{len(rr.segments)} RR segments memory-bound, idle {float(idle):.0%}; "
            f"{len(seg_bound)}/{len(seg.segments)} Segmented")


def test_pareto_verifier(verdict):
    runs = problems = 0
    for name in ("mobilenetv2", "resnet50", "xception"):
        cnn = load_cnn(name)
        for board in ("zc706", "zcu102"):
            for objectives in ((("throughput", "max"), ("buffer", "min")), (("latency", "min"), ("accesses", "min"))):
                cfg = DesignSpaceConfig(sample_size=60, rng_seed=runs, objectives=objectives)
                result = explore(cfg, cnn, load_platform(board))
                problems += len(verify_front(result.front, result.points))
                problems += not result.front.points
                runs += 1
    verdict(8, "Pareto fronts verified", problems == 0, f"{runs} explore runs, {problems} problems")
