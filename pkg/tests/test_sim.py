import random
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from mccm.blocks import tile_latency
from mccm.builder import ComputeEngine, Parallelism, build
from mccm.composer import compose
from mccm.descriptors import FpgaPlatform, cnn_from_dict
from mccm.errors import InfeasibleDesign, SimulationCapExceeded
from mccm.notation import parse_accelerator
from mccm.sim import simulate

from instances import random_cnn, random_platform, random_sketch


def built(seed, compute_bound):
    rng = random.Random(seed)
    cnn = random_cnn(rng)
    sketch = random_sketch(rng, len(cnn))
    platform = random_platform(rng, compute_bound, on_chip=rng.choice((None, rng.randint(1, 60_000))))
    try:
        return build(sketch, cnn, platform)
    except InfeasibleDesign:
        return None


def test_864_cycle_layer():
    cnn = cnn_from_dict({"layers": [{"filters": 6, "kernel": [3, 3], "in_channels": 3, "ifm": [8, 8]}]})
    acc = build(parse_accelerator("{L1: CE1}", cnn), cnn, FpgaPlatform("p", 16, 10 ** 9, 10 ** 12))
    acc = replace(acc, ces=(ComputeEngine(1, 16, Parallelism(4, 2, 2), (1,)),))
    sim = simulate(acc)
    layer = cnn.layer(1)
    assert sim.cycles == 864
    assert sim.access_bytes == layer.weights_bytes + layer.ifms_bytes + layer.ofms_bytes
    assert sim.access.weights == layer.weights_bytes


def test_uniform_three_stage_pipeline():
    cnn = cnn_from_dict({"layers": [{"filters": 4, "kernel": [3, 3], "in_channels": 4, "ifm": [4, 4]}
                                    for _ in range(3)]})
    acc = build(parse_accelerator("{L1-L3: CE1-CE3}", cnn), cnn, FpgaPlatform("p", 12, 10 ** 9, 10 ** 12))
    c = tile_latency(cnn.layer(1), acc.ce(1).parallelism.factors, rows=1)
    assert {acc.ce(i).parallelism for i in (1, 2, 3)} == {acc.ce(1).parallelism}
    assert [r.tiles for r in acc.buffers.layers] == [4, 4, 4]
    sim = simulate(acc)
    assert sim.cycles == 6 * c
    assert sim.stage_cycles == [[c] * 6]


def test_empty_accelerator():
    with pytest.raises(ValueError, match="empty accelerator"):
        simulate(None)


def test_cap():
    cnn = cnn_from_dict({"layers": [{"filters": 64, "kernel": [3, 3], "in_channels": 64, "ifm": [32, 32]}]})
    acc = build(parse_accelerator("{L1: CE1}", cnn), cnn, FpgaPlatform("p", 16, 10 ** 9, 10 ** 12))
    with pytest.raises(SimulationCapExceeded, match="exceed the simulation cap"):
        simulate(acc, cap=1000)


def test_trace_csv():
    cnn = cnn_from_dict({"layers": [{"filters": 2, "kernel": [3, 3], "in_channels": 2, "ifm": [4, 4]}
                                    for _ in range(2)]})
    acc = build(parse_accelerator("{L1: CE1, L2: CE2}", cnn), cnn, FpgaPlatform("p", 4, 10 ** 9, 10 ** 9))
    text = simulate(acc, trace=True).trace_csv()
    assert text.splitlines()[0] == "event,cycle,ce,kind,bytes"
    assert any(line.startswith("load_weights,") for line in text.splitlines())


@settings(max_examples=120)
@given(st.integers(0, 2 ** 32))
def test_compute_bound_equivalence(seed):
    acc = built(seed, True)
    if acc is None:
        return
    report = compose(acc)
    sim = simulate(acc)
    assert sim.cycles == report.compute_cycles
    assert sim.access_bytes == report.access_bytes
    assert sim.access.weights == report.access.weights
    assert sim.time_s == report.latency_s
    assert sim.tiles_scheduled == sim.tiles_expected
    assert sim.access.weights >= acc.cnn.total_weights * acc.cnn.word_bytes


@settings(max_examples=120)
@given(st.integers(0, 2 ** 32))
def test_memory_bound_within_one_stage(seed):
    acc = built(seed, False)
    if acc is None:
        return
    report = compose(acc)
    sim = simulate(acc)
    assert sim.cycles == report.compute_cycles
    assert sim.access_bytes == report.access_bytes
    stage = max(Fraction(max(s), acc.platform.clock_hz) for s in sim.stage_cycles)
    assert abs(sim.time_s - report.latency_s) <= stage
