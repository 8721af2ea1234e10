import itertools
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from mccm.blocks import (Access, ce_busy_cycles, pipeline_schedule, pipelined_accesses, pipelined_block_latency,
                         pipelined_block_throughput, pipelined_buffer, single_ce_accesses, single_ce_buffer,
                         single_ce_layer_accesses, single_ce_layer_latency, streaming_options, tile_latency,
                         underutilization)
from mccm.builder import ComputeEngine, Parallelism
from mccm.descriptors import ConvLayer, layer_macs

KB = 1024


def conv(filters=6, size=8, channels=3, k=3, kind="standard"):
    return ConvLayer(1, kind, filters, k, k, channels, size, size, size, size)


def engine(pe, pf, ph, pw):
    return ComputeEngine(1, pe, Parallelism(pf, ph, pw))


def enumerate_steps(layer, pf, ph, pw):
    """Count PE-array steps by visiting every output block and reduction step."""
    steps = 0
    for _f, _h, _w in itertools.product(range(0, layer.num_filters, pf), range(0, layer.ofm_h, ph),
                                        range(0, layer.ofm_w, pw)):
        for _ in itertools.product(range(layer.reduction_depth), range(layer.kernel_h), range(layer.kernel_w)):
            steps += 1
    return steps


def stage_table(tile_lat, tiles):
    """Stage maxima by explicit stage-by-stage enumeration."""
    stages = max(t + j for j, t in enumerate(tiles))
    out = []
    for s in range(1, stages + 1):
        active = [tile_lat[j - 1] for j in range(1, len(tiles) + 1) if j <= s < j + tiles[j - 1]]
        out.append(max(active))
    return out


# -- latency -----------------------------------------------------------------

def test_worked_latency_864():
    layer = conv()
    assert single_ce_layer_latency(layer, engine(16, 4, 2, 2)) == 864
    assert enumerate_steps(layer, 4, 2, 2) == 864


def test_filter_dimension_half_used_on_second_pass():
    layer = conv()
    util = 1 - underutilization(layer_macs(layer), 864 * 16)
    assert util == Fraction(10368, 864 * 16) == Fraction(3, 4)


def test_sequential_and_dividing_cases():
    layer = conv(filters=8)
    assert single_ce_layer_latency(layer, engine(1, 1, 1, 1)) == layer_macs(layer)
    assert single_ce_layer_latency(layer, engine(16, 4, 2, 2)) == layer_macs(layer) // 16


@given(st.integers(1, 12), st.integers(1, 10), st.integers(1, 6), st.sampled_from([1, 3]),
       st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_latency_matches_enumeration_and_lower_bound(filters, size, channels, k, pf, ph, pw):
    layer = conv(filters, size, channels, k)
    ce = engine(pf * ph * pw, pf, ph, pw)
    lat = single_ce_layer_latency(layer, ce)
    assert lat == enumerate_steps(layer, pf, ph, pw)
    ideal = -(-layer_macs(layer) // ce.pe_count)
    assert lat >= ideal
    divides = filters % pf == 0 and size % ph == 0 and size % pw == 0
    assert (lat * ce.pe_count == layer_macs(layer)) == divides


def test_tile_latency_uses_tile_rows():
    layer = conv()
    assert tile_latency(layer, (4, 2, 2), rows=1) == 2 * 1 * 4 * 27
    assert tile_latency(layer, (4, 2, 2)) == 864


# -- schedule ----------------------------------------------------------------

def test_schedule_three_ces_four_tiles():
    s = pipeline_schedule([4, 4, 4])
    assert s.num_stages == 6
    assert [s.active_ces(i) for i in range(1, 7)] == [[1], [1, 2], [1, 2, 3], [1, 2, 3], [2, 3], [3]]


def test_schedule_degenerate_cases():
    assert pipeline_schedule([5]).num_stages == 5
    assert pipeline_schedule([5]).active_ces(3) == [1]
    assert pipeline_schedule([1, 1]).num_stages == 2
    with pytest.raises(ValueError, match="zero tile count"):
        pipeline_schedule([3, 0])


@given(st.lists(st.integers(1, 10), min_size=1, max_size=7))
def test_schedule_conservation_and_skew(tiles):
    s = pipeline_schedule(tiles)
    slots = list(s.assignments())
    assert len(slots) == sum(tiles)
    assert len({(j, t) for _, j, t in slots}) == len(slots)
    for j in range(1, len(tiles) + 1):
        assert len(s.active_stages(j)) == tiles[j - 1]
        if j > 1:
            assert s.active_stages(j)[0] >= s.active_stages(j - 1)[0] + 1
    assert s.num_stages == max(t + j for j, t in enumerate(tiles))


# -- pipelined latency and throughput ----------------------------------------

def test_worked_pipeline_150_and_120():
    s = pipeline_schedule([4, 4, 4])
    assert stage_table([10, 30, 20], [4, 4, 4]) == [10, 30, 30, 30, 30, 20]
    assert pipelined_block_latency([10, 30, 20], s) == 150
    assert ce_busy_cycles([10, 30, 20], s) == [40, 120, 80]
    thr = pipelined_block_throughput([10, 30, 20], s, 10 ** 9)
    assert thr == Fraction(10 ** 9, 120)
    assert float(thr) == pytest.approx(8.33e6, rel=1e-3)
    latency_s = Fraction(150, 10 ** 9)
    assert thr * latency_s == Fraction(5, 4)


def test_single_ce_pipeline_is_a_sum():
    s = pipeline_schedule([2])
    assert pipelined_block_latency([[5, 5]], s) == 10
    assert pipelined_block_throughput([[5, 5]], s, 100) * Fraction(10, 100) == 1


@given(st.integers(1, 100), st.integers(1, 8), st.integers(1, 12))
def test_uniform_closed_form(c, ces, tiles):
    s = pipeline_schedule([tiles] * ces)
    assert pipelined_block_latency([c] * ces, s) == (tiles + ces - 1) * c


@given(st.lists(st.tuples(st.integers(1, 200), st.integers(1, 8)), min_size=1, max_size=6))
def test_pipeline_latency_matches_enumeration_and_law(ces):
    lat, tiles = (list(x) for x in zip(*ces))
    s = pipeline_schedule(tiles)
    total = pipelined_block_latency(lat, s)
    assert total == sum(stage_table(lat, tiles))
    per_tile = [[l] * t for l, t in ces]
    assert pipelined_block_latency(per_tile, s) == total
    assert pipelined_block_throughput(lat, s, 1) * total >= 1


@given(st.lists(st.lists(st.integers(1, 50), min_size=1, max_size=5), min_size=1, max_size=5))
def test_per_tile_latencies_match_enumeration(per_tile):
    tiles = [len(p) for p in per_tile]
    s = pipeline_schedule(tiles)
    expected = [0] * s.num_stages
    for j, row in enumerate(per_tile):
        for t, v in enumerate(row):
            expected[j + t] = max(expected[j + t], v)
    assert pipelined_block_latency(per_tile, s) == sum(expected)


# -- buffers -----------------------------------------------------------------

def test_single_ce_buffer_examples():
    assert single_ce_buffer([300 * KB, 250 * KB], [64 * KB, 32 * KB]) == 364 * KB
    assert single_ce_buffer([7], [3]) == 10
    # a live residual copy of 100 KB is part of the layer's FM term
    assert single_ce_buffer([300 * KB + 100 * KB, 250 * KB], [64 * KB, 32 * KB]) == 464 * KB


def test_pipelined_buffer_examples():
    assert pipelined_buffer([10 * KB, 20 * KB], [8 * KB, 4 * KB]) == 54 * KB
    assert pipelined_buffer([10, 20], [0, 0]) == 30


@given(st.lists(st.tuples(st.integers(0, 10 ** 6), st.integers(0, 10 ** 5)), min_size=1, max_size=8))
def test_pipelined_buffer_linear_in_fm_tiles(rows):
    w, f = (list(x) for x in zip(*rows))
    assert pipelined_buffer(w, [2 * x for x in f]) - pipelined_buffer(w, f) == 2 * sum(f)


# -- accesses ----------------------------------------------------------------

def test_single_ce_accesses_examples():
    assert single_ce_layer_accesses(100, 30, 40, False, False).total == 40
    a, b = streaming_options(100, 40, 50, 20)
    assert (a.total, b.total) == (180, 240)
    assert single_ce_layer_accesses(100, 30, 40, True, False, 50, 20).total == 180
    assert single_ce_layer_accesses(100, 30, 40, True, True, 50, 20).total == 210


def test_single_ce_buffer_constraint_asserted():
    layer = conv()
    with pytest.raises(ValueError, match="exceed the CE buffer"):
        single_ce_accesses([layer], [True], [False], 100, 100, ce_buffer=150)


def test_pipelined_accesses_examples():
    s = pipeline_schedule([4, 4])
    assert pipelined_accesses([10 * KB, 20 * KB], [True, True], s)[0].total == 30 * KB
    assert pipelined_accesses([10 * KB, 20 * KB], [False, False], s)[0].total == 120 * KB
    one = pipeline_schedule([1])
    assert pipelined_accesses([9], [False], one)[0] == pipelined_accesses([9], [True], one)[0] == Access(weights=9)


@given(st.lists(st.tuples(st.integers(1, 10 ** 5), st.booleans(), st.integers(1, 9)), min_size=1, max_size=6))
def test_pipelined_access_floor(ces):
    w, keep, tiles = (list(x) for x in zip(*ces))
    acc, per_ce = pipelined_accesses(w, keep, pipeline_schedule(tiles))
    assert acc.total >= sum(w) and acc.fms == 0
    assert per_ce == [x if k else x * t for x, k, t in ces]


@given(st.integers(1, 10 ** 4), st.integers(1, 10 ** 4), st.integers(1, 10 ** 4), st.integers(1, 10 ** 4),
       st.integers(1, 10 ** 4), st.booleans(), st.booleans())
def test_single_ce_access_floor(ifms, ofms, w, ibuf, wbuf, ifm_off, ofm_off):
    acc = single_ce_layer_accesses(ifms, ofms, w, ifm_off, ofm_off, ibuf, wbuf)
    assert acc.weights >= w
    assert acc.total >= w + (ifms if ifm_off else 0) + (ofms if ofm_off else 0)
