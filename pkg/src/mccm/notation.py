"""Compact multiple-CE accelerator notation.

    {L1-L4: CE1, L5-L6: CE2, L7-Last: CE3}     three single-CE blocks
    {L1-Last: CE1-CE4}                          one pipelined block, round-robin
    {L1-L3: CE1-CE3, L4-Last: CE4}              pipelined prefix + single CE

Grammar (whitespace-insensitive, ``Last`` case-insensitive)::

    sketch  := "{" mapping ("," mapping)* "}"
    mapping := range ":" ces
    range   := "L" int ["-" ("L" int | "Last")]
    ces     := "CE" int ["-" "CE" int]
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .errors import NotationError

_TOKEN = re.compile(r"\s*(?:(?P<ce>CE)|(?P<last>last)|(?P<l>L)|(?P<int>\d+)|(?P<punct>[{}:,\-]))", re.IGNORECASE)


@dataclass(frozen=True)
class BlockSketch:
    layer_lo: int
    layer_hi: int | None  # None only when Last is unresolved (no CNN given)
    ce_lo: int
    ce_hi: int
    hi_is_last: bool = False

    @property
    def pipelined(self) -> bool:
        return self.ce_hi != self.ce_lo

    @property
    def num_ces(self) -> int:
        return self.ce_hi - self.ce_lo + 1

    @property
    def ce_ids(self) -> range:
        return range(self.ce_lo, self.ce_hi + 1)

    @property
    def num_layers(self) -> int:
        return self.layer_hi - self.layer_lo + 1

    @property
    def layers(self) -> range:
        return range(self.layer_lo, self.layer_hi + 1)

    @property
    def passes(self) -> int:
        """Round-robin passes: ceil(layers / CEs)."""
        return math.ceil(self.num_layers / self.num_ces)


@dataclass(frozen=True)
class AcceleratorSketch:
    blocks: tuple[BlockSketch, ...]
    inter_segment_pipelining: bool = True

    @property
    def num_ces(self) -> int:
        return sum(b.num_ces for b in self.blocks)

    @property
    def num_layers(self) -> int | None:
        return self.blocks[-1].layer_hi


def _tokenize(text: str):
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                return
            col = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise NotationError(f"unexpected character {text[col]!r}", col)
        start = m.start(m.lastgroup)
        kind = m.lastgroup
        yield kind, m.group(kind), start
        pos = m.end()


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = list(_tokenize(text))
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else ("eof", "", len(self.text))

    def take(self, kind, value=None, what=None):
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = what or (value if value is not None else kind)
            got = "end of input" if tok[0] == "eof" else repr(tok[1])
            raise NotationError(f"expected {want}, got {got}", tok[2])
        self.i += 1
        return tok

    def at(self, kind, value=None):
        tok = self.peek()
        return tok[0] == kind and (value is None or tok[1] == value)

    def integer(self):
        return int(self.take("int", what="an integer")[1]), self.toks[self.i - 1][2]

    def sketch(self):
        self.take("punct", "{", "'{'")
        mappings = [self.mapping()]
        while self.at("punct", ","):
            self.i += 1
            mappings.append(self.mapping())
        self.take("punct", "}", "',' or '}'")
        if self.peek()[0] != "eof":
            raise NotationError("trailing input after '}'", self.peek()[2])
        return mappings

    def mapping(self):
        self.take("l", what="'L'")
        lo, lo_pos = self.integer()
        hi, last = lo, False
        if self.at("punct", "-"):
            self.i += 1
            if self.at("last"):
                self.i += 1
                hi, last = None, True
            else:
                self.take("l", what="'L' or 'Last'")
                hi, _ = self.integer()
        self.take("punct", ":", "':'")
        ce_tok = self.take("ce", what="'CE'")
        ce_lo, _ = self.integer()
        ce_hi = ce_lo
        if self.at("punct", "-"):
            self.i += 1
            self.take("ce", what="'CE'")
            ce_hi, _ = self.integer()
        return lo, hi, last, ce_lo, ce_hi, lo_pos, ce_tok[2]


def parse_accelerator(text: str, cnn=None, inter_segment_pipelining: bool | None = None) -> AcceleratorSketch:
    """Parse notation text; ``cnn`` (a CnnModel or layer count) resolves ``Last`` and checks coverage."""
    if cnn is None:
        n_layers = None
    elif isinstance(cnn, int):
        n_layers = cnn
    else:
        n_layers = len(cnn)
    mappings = _Parser(text).sketch()

    blocks = []
    expected_lo = 1
    seen_ces: dict[int, int] = {}
    for k, (lo, hi, last, ce_lo, ce_hi, lo_pos, ce_pos) in enumerate(mappings):
        if last:
            if k != len(mappings) - 1:
                raise NotationError("'Last' may only close the final range", lo_pos)
            hi = n_layers
        if lo < 1:
            raise NotationError("layer indices start at 1", lo_pos)
        if hi is not None and hi < lo:
            raise NotationError(f"empty layer range L{lo}-L{hi}", lo_pos)
        if n_layers is not None and hi is not None and hi > n_layers:
            raise NotationError(f"layer L{hi} beyond CNN depth {n_layers}", lo_pos)
        if ce_lo < 1 or ce_hi < ce_lo:
            raise NotationError(f"invalid CE range CE{ce_lo}-CE{ce_hi}", ce_pos)
        if lo < expected_lo:
            raise NotationError(f"overlapping ranges L{lo}-L{expected_lo - 1}", lo_pos)
        if lo > expected_lo:
            raise NotationError(f"gap in layer coverage L{expected_lo}-L{lo - 1}", lo_pos)
        for ce in range(ce_lo, ce_hi + 1):
            if ce in seen_ces:
                raise NotationError(f"duplicate CE id CE{ce}", ce_pos)
            seen_ces[ce] = k
        if hi is not None and ce_hi > ce_lo and (ce_hi - ce_lo + 1) > (hi - lo + 1):
            raise NotationError(f"pipelined block CE{ce_lo}-CE{ce_hi} has more CEs than layers", ce_pos)
        blocks.append(BlockSketch(lo, hi, ce_lo, ce_hi, hi_is_last=last))
        expected_lo = hi + 1 if hi is not None else None
        if expected_lo is None:
            break
    if n_layers is not None and expected_lo is not None and expected_lo != n_layers + 1:
        raise NotationError(f"layers L{expected_lo}-L{n_layers} not covered", len(text))
    if inter_segment_pipelining is None:
        inter_segment_pipelining = len(blocks) > 1
    return AcceleratorSketch(tuple(blocks), inter_segment_pipelining)


def format_accelerator(sketch: AcceleratorSketch) -> str:
    parts = []
    for b in sketch.blocks:
        if b.hi_is_last:
            rng = f"L{b.layer_lo}-Last"
        elif b.layer_hi == b.layer_lo:
            rng = f"L{b.layer_lo}"
        else:
            rng = f"L{b.layer_lo}-L{b.layer_hi}"
        ces = f"CE{b.ce_lo}" if b.ce_lo == b.ce_hi else f"CE{b.ce_lo}-CE{b.ce_hi}"
        parts.append(f"{rng}: {ces}")
    return "{" + ", ".join(parts) + "}"


def round_robin_passes(block: BlockSketch) -> list[tuple[int, ...]]:
    """Layer groups processed together by a pipelined block, one tuple per pass."""
    layers = list(block.layers)
    k = block.num_ces
    return [tuple(layers[i:i + k]) for i in range(0, len(layers), k)]
