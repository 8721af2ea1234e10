import itertools
import json

import pytest
from hypothesis import given, strategies as st

from mccm.descriptors import (ConvLayer, FpgaPlatform, bundled_cnns, bundled_platforms, cnn_from_dict,
                              cnn_to_dict, layer_macs, load_cnn, load_platform, platform_from_dict,
                              residual_liveness, save_cnn)
from mccm.errors import DescriptorError

MIB = 1 << 20

# conv layers and weight counts (millions) of the five reference networks
REFERENCE_CNNS = {
    "resnet152": (155, 60.4, 2048),
    "resnet50": (53, 25.6, 2048),
    "xception": (74, 22.9, 2048),
    "densenet121": (120, 8.1, 1024),
    "mobilenetv2": (52, 3.5, 1280),
}


def enumerate_macs(layer: ConvLayer) -> int:
    """Count the six-loop iteration space one point at a time."""
    per_filter = 1 if layer.kind == "depthwise" else layer.in_channels
    filters = layer.in_channels if layer.kind == "depthwise" else layer.num_filters
    loops = (range(filters), range(layer.ofm_h), range(layer.ofm_w), range(per_filter),
             range(layer.kernel_h), range(layer.kernel_w))
    return sum(1 for _ in itertools.product(*loops))


def make_layer(kind="standard", filters=6, k=3, channels=3, size=8, stride=1, **kw):
    return ConvLayer(index=kw.pop("index", 1), kind=kind, num_filters=filters, kernel_h=k, kernel_w=k,
                     in_channels=channels, ifm_h=size, ifm_w=size, ofm_h=-(-size // stride),
                     ofm_w=-(-size // stride), stride=stride, **kw)


def test_macs_worked_examples():
    assert layer_macs(make_layer(filters=6, k=3, channels=3, size=8)) == 10368
    assert layer_macs(make_layer("pointwise", filters=1, k=1, channels=1, size=1)) == 1
    assert layer_macs(make_layer("depthwise", filters=3, k=3, channels=3, size=2)) == 108


def test_macs_match_enumeration_on_examples():
    for layer in (make_layer(filters=6, k=3, channels=3, size=8),
                  make_layer("depthwise", filters=3, k=3, channels=3, size=2)):
        assert layer_macs(layer) == enumerate_macs(layer)


@given(kind=st.sampled_from(["standard", "depthwise", "pointwise"]), filters=st.integers(1, 8),
       k=st.integers(1, 5), channels=st.integers(1, 8), size=st.integers(1, 8), stride=st.integers(1, 3))
def test_macs_equal_exhaustive_count(kind, filters, k, channels, size, stride):
    if kind == "pointwise":
        k = 1
    if kind == "depthwise":
        filters = channels
    layer = make_layer(kind, filters, k, channels, size, stride)
    assert layer_macs(layer) == enumerate_macs(layer)


@given(word=st.integers(1, 4), filters=st.integers(1, 16), channels=st.integers(1, 16), size=st.integers(1, 16))
def test_sizes_scale_with_word_bytes(word, filters, channels, size):
    one = make_layer(filters=filters, channels=channels, size=size)
    many = make_layer(filters=filters, channels=channels, size=size, word_bytes=word)
    for attr in ("weights_bytes", "ifms_bytes", "ofms_bytes"):
        assert getattr(many, attr) == word * getattr(one, attr) >= word


def test_pointwise_weights():
    cnn = cnn_from_dict({"layers": [{"kind": "pointwise", "filters": 64, "kernel": [1, 1], "in_channels": 32,
                                     "ifm": [7, 7]}]})
    assert cnn.total_weights == 2048


def test_bundled_lists():
    assert set(REFERENCE_CNNS) <= set(bundled_cnns())
    assert set(bundled_platforms()) >= {"zc706", "vcu108", "vcu110", "zcu102"}


@pytest.mark.parametrize("name", sorted(REFERENCE_CNNS))
def test_reference_layer_counts(name):
    layers, _, _ = REFERENCE_CNNS[name]
    assert len(load_cnn(name)) == layers


@pytest.mark.parametrize("name", sorted(REFERENCE_CNNS))
def test_reference_weights_with_classifier(name):
    # descriptors hold convolutions only; the published counts also include the classifier
    _, millions, features = REFERENCE_CNNS[name]
    classifier = features * 1000 + 1000
    total = load_cnn(name).total_weights + classifier
    assert total == pytest.approx(millions * 1e6, rel=0.03)


def test_resnet50_conv_weights_exact():
    assert load_cnn("resnet50").total_weights == 23_454_912


@pytest.mark.parametrize("name,pe,mib,gbs", [
    ("zc706", 900, 2.4, 3.2), ("vcu110", 1800, 4.0, 19.2), ("vcu108", 768, 7.6, 19.2), ("zcu102", 2520, 16.6, 19.2),
])
def test_bundled_boards(name, pe, mib, gbs):
    p = load_platform(name)
    assert p.pe_count == pe
    assert p.on_chip_bytes == round(mib * MIB)
    assert p.bandwidth == gbs * 1e9
    assert p.clock_assumed


def test_platform_errors():
    with pytest.raises(DescriptorError, match="non-positive bandwidth"):
        platform_from_dict({"pe_count": 10, "on_chip_bytes": 10, "bandwidth_bytes_per_s": 0})
    with pytest.raises(DescriptorError, match="missing field 'pe_count'"):
        platform_from_dict({"on_chip_bytes": 10, "bandwidth_bytes_per_s": 1})
    p = platform_from_dict({"pe_count": 1, "on_chip_bytes": 1, "bandwidth_bytes_per_s": 1, "clock_hz": 5})
    assert p.clock_hz == 5 and not p.clock_assumed
    assert platform_from_dict({"pe_count": 1, "on_chip_bytes": 1, "bandwidth_bytes_per_s": 1e9}).bandwidth == 10 ** 9
    with pytest.raises(DescriptorError, match="bandwidth must be an integer"):
        platform_from_dict({"pe_count": 1, "on_chip_bytes": 1, "bandwidth_bytes_per_s": 1.5})


def test_cnn_errors():
    with pytest.raises(DescriptorError, match="empty layer list"):
        cnn_from_dict({"layers": []})
    with pytest.raises(DescriptorError, match="layer 2: dangling residual"):
        cnn_from_dict({"layers": [{"filters": 1, "in_channels": 1, "ifm": [2, 2]},
                                  {"filters": 1, "in_channels": 1, "ifm": [2, 2], "residual_sources": [2]}]})
    with pytest.raises(DescriptorError, match="layer 1: non-positive dimension filters=0"):
        cnn_from_dict({"layers": [{"filters": 0, "in_channels": 1, "ifm": [2, 2]}]})
    with pytest.raises(DescriptorError, match="pointwise"):
        cnn_from_dict({"layers": [{"kind": "pointwise", "filters": 2, "kernel": [3, 3], "in_channels": 1,
                                   "ifm": [2, 2]}]})


def test_malformed_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DescriptorError, match="malformed JSON"):
        load_cnn(bad)
    with pytest.raises(DescriptorError, match="no such file"):
        load_cnn(tmp_path / "missing.json")


def test_same_padding_and_override():
    cnn = cnn_from_dict({"layers": [{"filters": 2, "kernel": [3, 3], "in_channels": 1, "ifm": [7, 7], "stride": 2},
                                    {"filters": 2, "in_channels": 2, "ifm": [4, 4], "ofm": [2, 2]}]})
    assert (cnn.layer(1).ofm_h, cnn.layer(1).ofm_w) == (4, 4)
    assert not cnn.layer(1).ofm_override
    assert cnn.layer(2).ofm_override and cnn.layer(2).ofm_h == 2


@pytest.mark.parametrize("name", sorted(REFERENCE_CNNS))
def test_round_trip(name, tmp_path):
    cnn = load_cnn(name)
    path = tmp_path / "cnn.json"
    save_cnn(cnn, path)
    assert load_cnn(path) == cnn
    assert cnn_to_dict(load_cnn(path)) == json.loads(path.read_text())


def test_data_dir_override(tmp_path, monkeypatch):
    (tmp_path / "platforms").mkdir()
    (tmp_path / "cnns").mkdir()
    (tmp_path / "platforms" / "tiny.json").write_text(
        json.dumps({"name": "tiny", "pe_count": 4, "on_chip_bytes": 1024, "bandwidth_bytes_per_s": 1000}))
    monkeypatch.setenv("MCCM_DATA_DIR", str(tmp_path))
    assert load_platform("tiny").pe_count == 4
    assert bundled_platforms() == ["tiny"]


def test_residual_liveness_by_hand():
    # layer 1 feeds layer 4 through a skip link: a 1-filter 4x4 OFM (16 bytes) is held at layers 2..4
    layers = [{"filters": 1, "in_channels": 1, "ifm": [4, 4]} for _ in range(4)]
    layers[3]["residual_sources"] = [1]
    cnn = cnn_from_dict({"layers": layers})
    live, crossing = residual_liveness(cnn, with_crossing=True)
    assert live.tolist() == [0, 16, 16, 16]
    assert crossing.tolist() == [0, 16, 16, 0]
    assert cnn.arrays.fms.tolist() == [32, 48, 48, 48]


def test_platform_invariants():
    with pytest.raises(DescriptorError):
        FpgaPlatform("x", pe_count=0, on_chip_bytes=1, bandwidth=1)
    p = FpgaPlatform("x", 1, 1, 1)
    assert p.with_(clock_hz=7).clock_hz == 7
