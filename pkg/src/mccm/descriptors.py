"""CNN model and FPGA platform descriptors.

A CNN is a flat list of convolution layers in topological order. Only
convolutions are described; pooling, activations and classifiers are left
out. Every size the cost model needs (weights, IFMs, OFMs, live feature-map
footprint, MACs) is derived here and cached as numpy arrays on the model.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DescriptorError

KINDS = ("standard", "depthwise", "pointwise")

DEFAULT_CLOCK_HZ = 200_000_000
MIB = 1 << 20

_DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class ConvLayer:
    index: int
    kind: str
    num_filters: int
    kernel_h: int
    kernel_w: int
    in_channels: int
    ifm_h: int
    ifm_w: int
    ofm_h: int
    ofm_w: int
    stride: int = 1
    residual_sources: tuple[int, ...] = ()
    word_bytes: int = 1
    # set when the descriptor gave OFM dims that differ from same-padding
    ofm_override: bool = False

    @property
    def reduction_depth(self) -> int:
        return 1 if self.kind == "depthwise" else self.in_channels

    @property
    def weights_count(self) -> int:
        return self.num_filters * self.kernel_h * self.kernel_w * self.reduction_depth

    @property
    def weights_bytes(self) -> int:
        return self.weights_count * self.word_bytes

    @property
    def ifms_bytes(self) -> int:
        return self.ifm_h * self.ifm_w * self.in_channels * self.word_bytes

    @property
    def ofms_bytes(self) -> int:
        return self.ofm_h * self.ofm_w * self.num_filters * self.word_bytes

    @property
    def macs(self) -> int:
        return layer_macs(self)

    def weights_tile_bytes(self, filter_factor: int) -> int:
        """Weights of one concurrently processed filter batch."""
        f = min(filter_factor, self.num_filters)
        return f * self.kernel_h * self.kernel_w * self.reduction_depth * self.word_bytes


def layer_macs(layer: ConvLayer) -> int:
    """MAC count of the six-loop convolution nest."""
    if layer.kind == "depthwise":
        return layer.in_channels * layer.ofm_h * layer.ofm_w * layer.kernel_h * layer.kernel_w
    return (layer.num_filters * layer.ofm_h * layer.ofm_w
            * layer.kernel_h * layer.kernel_w * layer.in_channels)


@dataclass(frozen=True)
class CnnModel:
    name: str
    layers: tuple[ConvLayer, ...]
    word_bytes: int = 1

    def __post_init__(self):
        if not self.layers:
            raise DescriptorError("empty layer list")
        for pos, layer in enumerate(self.layers, start=1):
            if layer.index != pos:
                raise DescriptorError(f"layer indices must be contiguous from 1, found {layer.index} at position {pos}",
                                      layer=layer.index)
            for src in layer.residual_sources:
                if not 1 <= src < layer.index:
                    raise DescriptorError(f"dangling residual reference to layer {src}", layer=layer.index)

    def __len__(self):
        return len(self.layers)

    def layer(self, index: int) -> ConvLayer:
        return self.layers[index - 1]

    @property
    def total_weights(self) -> int:
        return sum(l.weights_count for l in self.layers)

    @property
    def total_weights_bytes(self) -> int:
        return sum(l.weights_bytes for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @cached_property
    def arrays(self) -> LayerArrays:
        return LayerArrays.from_model(self)


@dataclass(frozen=True, eq=False)
class LayerArrays:
    """Column view of per-layer quantities, indexed by layer index - 1."""

    filters: np.ndarray
    out_h: np.ndarray
    out_w: np.ndarray
    reduction: np.ndarray  # reduction_depth * kernel_h * kernel_w
    macs: np.ndarray
    weights: np.ndarray
    ifms: np.ndarray
    ofms: np.ndarray
    residual_live: np.ndarray  # bytes of extra live copies held during the layer
    fms: np.ndarray  # ifms + ofms + residual_live
    crossing: np.ndarray  # residual copies (other than the layer's own OFM) live after the layer
    per_filter_weights: np.ndarray  # weights bytes of a single filter
    ifm_row_band: np.ndarray  # one kernel-height band of IFM rows

    @classmethod
    def from_model(cls, cnn: CnnModel) -> LayerArrays:
        L = cnn.layers
        i64 = np.int64
        filters = np.array([l.num_filters for l in L], dtype=i64)
        weights = np.array([l.weights_bytes for l in L], dtype=i64)
        ifms = np.array([l.ifms_bytes for l in L], dtype=i64)
        ofms = np.array([l.ofms_bytes for l in L], dtype=i64)
        live, crossing = residual_liveness(cnn, with_crossing=True)
        arrs = cls(
            filters=filters,
            out_h=np.array([l.ofm_h for l in L], dtype=i64),
            out_w=np.array([l.ofm_w for l in L], dtype=i64),
            reduction=np.array([l.reduction_depth * l.kernel_h * l.kernel_w for l in L], dtype=i64),
            macs=np.array([l.macs for l in L], dtype=i64),
            weights=weights,
            ifms=ifms,
            ofms=ofms,
            residual_live=live,
            fms=ifms + ofms + live,
            crossing=crossing,
            per_filter_weights=weights // filters,
            ifm_row_band=np.array([l.ifm_w * l.in_channels * min(l.kernel_h, l.ifm_h) * l.word_bytes for l in L],
                                  dtype=i64),
        )
        for a in vars(arrs).values():
            a.flags.writeable = False
        return arrs


def residual_liveness(cnn: CnnModel, with_crossing: bool = False):
    """Extra bytes each layer must hold for residual sources still awaiting consumption.

    A source s consumed last by layer c occupies one OFM-sized copy at every
    layer i with s < i <= c. With ``with_crossing`` also returns, per layer b,
    the bytes of such copies that stay live past b, excluding b's own OFM.
    """
    n = len(cnn)
    last_use: dict[int, int] = {}
    for layer in cnn.layers:
        for src in layer.residual_sources:
            last_use[src] = max(last_use.get(src, 0), layer.index)
    delta = np.zeros(n + 2, dtype=np.int64)
    for src, consumer in last_use.items():
        size = cnn.layer(src).ofms_bytes
        delta[src + 1] += size
        delta[consumer + 1] -= size
    live = np.cumsum(delta)[1:n + 1]
    if not with_crossing:
        return live
    # copies live at layer b+1 that were produced at or before b, minus b's own
    crossing = np.zeros(n, dtype=np.int64)
    crossing[:-1] = live[1:]
    for src, consumer in last_use.items():
        if consumer > src:
            crossing[src - 1] -= cnn.layer(src).ofms_bytes
    return live, crossing


@dataclass(frozen=True)
class FpgaPlatform:
    name: str
    pe_count: int
    on_chip_bytes: int
    bandwidth: int  # bytes per second
    clock_hz: int = DEFAULT_CLOCK_HZ
    clock_assumed: bool = field(default=False, compare=False)

    def __post_init__(self):
        for fname in ("pe_count", "on_chip_bytes", "bandwidth", "clock_hz"):
            value = getattr(self, fname)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise DescriptorError(f"{fname} must be an integer, got {value!r}")
            if value <= 0:
                label = "bandwidth" if fname == "bandwidth" else fname
                raise DescriptorError(f"non-positive {label}")

    def with_(self, **changes) -> FpgaPlatform:
        data = {k: getattr(self, k) for k in ("name", "pe_count", "on_chip_bytes", "bandwidth", "clock_hz",
                                               "clock_assumed")}
        data.update(changes)
        return FpgaPlatform(**data)


# ---------------------------------------------------------------------------
# loading / serialization


def _pair(value, what, index):
    if isinstance(value, int):
        return value, value
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return int(value[0]), int(value[1])
    raise DescriptorError(f"{what} must be an int or a [h, w] pair", layer=index)


def _layer_from_dict(raw: dict, pos: int, word_bytes: int) -> ConvLayer:
    if not isinstance(raw, dict):
        raise DescriptorError("layer entry must be an object", layer=pos)
    index = raw.get("index", pos)
    try:
        kind = raw.get("kind", "standard")
        filters = raw["filters"]
        kernel_h, kernel_w = _pair(raw.get("kernel", 1), "kernel", index)
        in_channels = raw["in_channels"]
        ifm_h, ifm_w = _pair(raw["ifm"], "ifm", index)
        stride = raw.get("stride", 1)
        residual = tuple(raw.get("residual_sources", ()))
    except KeyError as exc:
        raise DescriptorError(f"missing field {exc.args[0]!r}", layer=index) from None
    wb = raw.get("word_bytes", word_bytes)
    if kind not in KINDS:
        raise DescriptorError(f"unknown kind {kind!r}", layer=index)
    for name, value in (("filters", filters), ("kernel_h", kernel_h), ("kernel_w", kernel_w),
                        ("in_channels", in_channels), ("ifm_h", ifm_h), ("ifm_w", ifm_w),
                        ("stride", stride), ("word_bytes", wb)):
        if not isinstance(value, int) or isinstance(value, bool):
            raise DescriptorError(f"{name} must be an integer", layer=index)
        if value < 1:
            raise DescriptorError(f"non-positive dimension {name}={value}", layer=index)
    if not all(isinstance(s, int) for s in residual):
        raise DescriptorError("residual_sources must be integers", layer=index)
    same_h, same_w = math.ceil(ifm_h / stride), math.ceil(ifm_w / stride)
    override = False
    if "ofm" in raw:
        ofm_h, ofm_w = _pair(raw["ofm"], "ofm", index)
        if ofm_h < 1 or ofm_w < 1:
            raise DescriptorError(f"non-positive dimension ofm={ofm_h}x{ofm_w}", layer=index)
        override = (ofm_h, ofm_w) != (same_h, same_w)
    else:
        ofm_h, ofm_w = same_h, same_w
    if kind == "pointwise" and (kernel_h, kernel_w) != (1, 1):
        raise DescriptorError("pointwise layers must have a 1x1 kernel", layer=index)
    if kind == "depthwise" and filters != in_channels:
        raise DescriptorError("depthwise layers must have filters == in_channels", layer=index)
    return ConvLayer(index=index, kind=kind, num_filters=filters, kernel_h=kernel_h, kernel_w=kernel_w,
                     in_channels=in_channels, ifm_h=ifm_h, ifm_w=ifm_w, ofm_h=ofm_h, ofm_w=ofm_w,
                     stride=stride, residual_sources=residual, word_bytes=wb, ofm_override=override)


def cnn_from_dict(doc: dict) -> CnnModel:
    if not isinstance(doc, dict):
        raise DescriptorError("CNN descriptor must be a JSON object")
    word_bytes = doc.get("word_bytes", 1)
    if not isinstance(word_bytes, int) or word_bytes < 1:
        raise DescriptorError(f"word_bytes must be a positive integer, got {word_bytes!r}")
    layers = doc.get("layers")
    if not isinstance(layers, list):
        raise DescriptorError("missing field 'layers'")
    if not layers:
        raise DescriptorError("empty layer list")
    parsed = tuple(_layer_from_dict(raw, pos, word_bytes) for pos, raw in enumerate(layers, start=1))
    return CnnModel(name=str(doc.get("name", "cnn")), layers=parsed, word_bytes=word_bytes)


def cnn_to_dict(cnn: CnnModel) -> dict:
    out = []
    for l in cnn.layers:
        entry = {
            "index": l.index,
            "kind": l.kind,
            "filters": l.num_filters,
            "kernel": [l.kernel_h, l.kernel_w],
            "in_channels": l.in_channels,
            "ifm": [l.ifm_h, l.ifm_w],
            "stride": l.stride,
            "residual_sources": list(l.residual_sources),
        }
        if l.ofm_override:
            entry["ofm"] = [l.ofm_h, l.ofm_w]
        if l.word_bytes != cnn.word_bytes:
            entry["word_bytes"] = l.word_bytes
        out.append(entry)
    return {"name": cnn.name, "word_bytes": cnn.word_bytes, "layers": out}


def _whole(value):
    """JSON writers often emit 1e9 for an integer; accept floats with no fractional part."""
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def platform_from_dict(doc: dict) -> FpgaPlatform:
    if not isinstance(doc, dict):
        raise DescriptorError("platform descriptor must be a JSON object")
    missing = [k for k in ("pe_count", "on_chip_bytes", "bandwidth_bytes_per_s") if k not in doc]
    if missing:
        raise DescriptorError(f"missing field {missing[0]!r}")
    return FpgaPlatform(
        name=str(doc.get("name", "fpga")),
        pe_count=_whole(doc["pe_count"]),
        on_chip_bytes=_whole(doc["on_chip_bytes"]),
        bandwidth=_whole(doc["bandwidth_bytes_per_s"]),
        clock_hz=_whole(doc.get("clock_hz", DEFAULT_CLOCK_HZ)),
        clock_assumed="clock_hz" not in doc,
    )


def platform_to_dict(p: FpgaPlatform) -> dict:
    return {"name": p.name, "pe_count": p.pe_count, "on_chip_bytes": p.on_chip_bytes,
            "bandwidth_bytes_per_s": p.bandwidth, "clock_hz": p.clock_hz}


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DescriptorError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    except OSError as exc:
        raise DescriptorError(f"{path}: {exc.strerror}") from None


def data_dir() -> Path:
    return Path(os.environ.get("MCCM_DATA_DIR", _DATA_DIR))


def _resolve(path_or_name, sub: str) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    candidate = data_dir() / sub / f"{str(path_or_name).lower()}.json"
    if candidate.exists():
        return candidate
    raise DescriptorError(f"{path_or_name}: no such file or bundled {sub[:-1]}")


def load_cnn(path) -> CnnModel:
    """Load a CNN descriptor from a file path or a bundled name (``resnet50``)."""
    p = _resolve(path, "cnns")
    try:
        return cnn_from_dict(_read_json(p))
    except DescriptorError as exc:
        if str(p) in str(exc):
            raise
        raise DescriptorError(f"{p}: {exc}") from None


def load_platform(path) -> FpgaPlatform:
    p = _resolve(path, "platforms")
    try:
        return platform_from_dict(_read_json(p))
    except DescriptorError as exc:
        raise DescriptorError(f"{p}: {exc}") from None


def save_cnn(cnn: CnnModel, path) -> None:
    Path(path).write_text(json.dumps(cnn_to_dict(cnn), indent=1) + "\n")


def bundled_cnns() -> list[str]:
    return sorted(p.stem for p in (data_dir() / "cnns").glob("*.json"))


def bundled_platforms() -> list[str]:
    return sorted(p.stem for p in (data_dir() / "platforms").glob("*.json"))
