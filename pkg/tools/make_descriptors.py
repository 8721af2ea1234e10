"""Regenerate the bundled CNN and platform descriptors.

    python tools/make_descriptors.py

Architectures follow the public reference definitions (torchvision / Keras
applications). Only convolution layers are emitted.
"""

import json
import math
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "mccm" / "data"


class Net:
    def __init__(self, name):
        self.name = name
        self.layers = []

    def conv(self, filters, k, cin, hw, stride=1, kind=None, residual=(), ofm=None):
        kind = kind or ("pointwise" if k == 1 else "standard")
        entry = {
            "index": len(self.layers) + 1,
            "kind": kind,
            "filters": filters,
            "kernel": [k, k],
            "in_channels": cin,
            "ifm": [hw, hw],
            "stride": stride,
            "residual_sources": sorted(residual),
        }
        if ofm is not None and ofm != math.ceil(hw / stride):
            entry["ofm"] = [ofm, ofm]
        self.layers.append(entry)
        return entry["index"], (ofm if ofm is not None else math.ceil(hw / stride))

    def dw(self, ch, k, hw, stride=1):
        return self.conv(ch, k, ch, hw, stride, kind="depthwise")

    def dump(self):
        return {"name": self.name, "word_bytes": 1, "layers": self.layers}


def resnet(name, stages):
    net = Net(name)
    last, hw = net.conv(64, 7, 3, 224, 2)
    hw = 56  # max pool
    cin = 64
    for stage, (blocks, mid) in enumerate(zip(stages, (64, 128, 256, 512))):
        out = mid * 4
        for b in range(blocks):
            stride = 2 if (b == 0 and stage > 0) else 1
            block_in, block_hw = last, hw
            c1, _ = net.conv(mid, 1, cin, hw)
            c2, hw2 = net.conv(mid, 3, mid, hw, stride)
            if b == 0:
                c3, _ = net.conv(out, 1, mid, hw2)
                last, _ = net.conv(out, 1, cin, block_hw, stride, residual=(block_in, c3))
            else:
                last, _ = net.conv(out, 1, mid, hw2, residual=(block_in,))
            hw, cin = hw2, out
    return net


def xception():
    net = Net("xception")
    _, hw = net.conv(32, 3, 3, 299, 2, ofm=149)
    last, hw = net.conv(64, 3, 32, 149, 1, ofm=147)
    cin = 64

    def sep(cin, cout, hw):
        net.dw(cin, 3, hw)
        return net.conv(cout, 1, cin, hw)[0]

    for cout in (128, 256, 728):
        block_in = last
        sep(cin, cout, hw)
        p2 = sep(cout, cout, hw)
        pooled = math.ceil(hw / 2)
        last, _ = net.conv(cout, 1, cin, hw, 2, residual=(block_in, p2))
        hw, cin = pooled, cout
    for _ in range(8):
        block_in = last
        sep(728, 728, hw)
        sep(728, 728, hw)
        last = sep(728, 728, hw)
        net.layers[last - 1]["residual_sources"] = [block_in]
    block_in = last
    sep(728, 728, hw)
    p2 = sep(728, 1024, hw)
    last, _ = net.conv(1024, 1, 728, hw, 2, residual=(block_in, p2))
    hw = math.ceil(hw / 2)
    sep(1024, 1536, hw)
    sep(1536, 2048, hw)
    return net


def mobilenet_v2():
    net = Net("mobilenetv2")
    last, hw = net.conv(32, 3, 3, 224, 2)
    net.dw(32, 3, hw)
    last, _ = net.conv(16, 1, 32, hw)
    cin = 16
    for t, c, n, s in ((6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1),
                       (6, 160, 3, 2), (6, 320, 1, 1)):
        for i in range(n):
            stride = s if i == 0 else 1
            block_in = last
            hidden = cin * t
            net.conv(hidden, 1, cin, hw)
            _, hw2 = net.dw(hidden, 3, hw, stride)
            residual = (block_in,) if (stride == 1 and cin == c) else ()
            last, _ = net.conv(c, 1, hidden, hw2, residual=residual)
            hw, cin = hw2, c
    net.conv(1280, 1, 320, hw)
    return net


def densenet121():
    net = Net("densenet121")
    last, _ = net.conv(64, 7, 3, 224, 2)
    hw, cin = 56, 64
    for bi, layers in enumerate((6, 12, 24, 16)):
        block_in = last
        produced = []
        for k in range(layers):
            ch = cin + 32 * k
            net.conv(128, 1, ch, hw, residual=[block_in] + produced)
            idx, _ = net.conv(32, 3, 128, hw)
            produced.append(idx)
        cin = cin + 32 * layers
        if bi < 3:
            last, _ = net.conv(cin // 2, 1, cin, hw)
            cin //= 2
            hw //= 2
    return net


PLATFORMS = {
    # name: (DSPs, Block RAM MiB, off-chip GB/s)
    "zc706": (900, 2.4, 3.2),
    "vcu108": (768, 7.6, 19.2),
    "vcu110": (1800, 4.0, 19.2),
    "zcu102": (2520, 16.6, 19.2),
}


def main():
    nets = [resnet("resnet50", (3, 4, 6, 3)), resnet("resnet152", (3, 8, 36, 3)), xception(),
            mobilenet_v2(), densenet121()]
    for net in nets:
        (OUT / "cnns" / f"{net.name}.json").write_text(json.dumps(net.dump(), indent=1) + "\n")
        print(net.name, len(net.layers))
    for name, (dsp, mib, gbs) in PLATFORMS.items():
        doc = {"name": name, "pe_count": dsp, "on_chip_bytes": int(round(mib * (1 << 20))),
               "bandwidth_bytes_per_s": int(round(gbs * 1e9))}
        (OUT / "platforms" / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main()
