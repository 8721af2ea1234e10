"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The JIT path is used when numba imports and ``MCCM_DISABLE_JIT`` is unset
(or ``0``). Both paths return identical integers; tests run them against
each other.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MCCM_DISABLE_JIT", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def candidate_factors(values, pe: int) -> np.ndarray:
    """Unroll candidates for one dimension: every ceil(v / q) for the layer sizes v.

    Latency is a step function of the factor, and the smallest factor of
    each step has this form, so the set loses no optimum. Capped at both
    ``pe`` and the largest size, since a larger factor only idles PEs.
    """
    values = np.unique(np.asarray(values, dtype=np.int64))
    cap = int(min(pe, values.max()))
    parts = [np.array([1], dtype=np.int64)]
    for v in values.tolist():
        q = np.arange(1, v + 1, dtype=np.int64)
        f = -(-v // q)
        parts.append(f[f <= cap])
    return np.unique(np.concatenate(parts))


# ---------------------------------------------------------------------------
# parallelism search


def _best_parallelism_numpy(F, OH, OW, R, cf, ch, cw, pe):
    a, b, c = np.meshgrid(cf, ch, cw, indexing="ij")
    prod = a * b * c
    mask = prod <= pe
    a, b, c, prod = a[mask], b[mask], c[mask], prod[mask]
    nf = -(-F[None, :] // cf[:, None])  # ceil tables, candidates x layers
    nh = -(-OH[None, :] // ch[:, None])
    nw = -(-OW[None, :] // cw[:, None])
    ia = np.searchsorted(cf, a)
    ib = np.searchsorted(ch, b)
    ic = np.searchsorted(cw, c)
    best = None
    step = max(1, 4_000_000 // max(1, len(F)))
    for s in range(0, len(a), step):
        sl = slice(s, s + step)
        lat = (nf[ia[sl]] * nh[ib[sl]] * nw[ic[sl]]) @ R
        order = np.lexsort((-b[sl], -a[sl], -prod[sl], lat))
        k = order[0]
        key = (int(lat[k]), -int(prod[sl][k]), -int(a[sl][k]), -int(b[sl][k]))
        if best is None or key < best[0]:
            best = (key, int(a[sl][k]), int(b[sl][k]), int(c[sl][k]))
    return best[1], best[2], best[3], best[0][0]


if HAVE_NUMBA:
    @njit(cache=True)
    def _best_parallelism_jit(F, OH, OW, R, cf, ch, cw, pe):
        n = F.shape[0]
        best_lat = np.iinfo(np.int64).max
        best_p = 0
        ba = 1
        bb = 1
        bc = 1
        for a in cf:
            if a > pe:
                break
            for b in ch:
                if a * b > pe:
                    break
                for c in cw:
                    p = a * b * c
                    if p > pe:
                        break
                    lat = 0
                    for i in range(n):
                        lat += ((F[i] + a - 1) // a) * ((OH[i] + b - 1) // b) * ((OW[i] + c - 1) // c) * R[i]
                        if lat > best_lat:
                            break
                    if lat > best_lat:
                        continue
                    if (lat < best_lat or p > best_p or (p == best_p and a > ba)
                            or (p == best_p and a == ba and b > bb)):
                        best_lat = lat
                        best_p = p
                        ba = a
                        bb = b
                        bc = c
        return ba, bb, bc, best_lat


def best_parallelism(F, OH, OW, R, cf, ch, cw, pe, backend=None):
    """Factor triple (filters, out_h, out_w) minimising the summed tiled-loop latency.

    Ties go to the larger product, then the larger filter factor, then the
    larger row factor.
    """
    args = [np.ascontiguousarray(x, dtype=np.int64) for x in (F, OH, OW, R, cf, ch, cw)]
    backend = backend or BACKEND
    if backend == "numba":
        a, b, c, lat = _best_parallelism_jit(*args, np.int64(pe))
        return int(a), int(b), int(c), int(lat)
    return _best_parallelism_numpy(*args, int(pe))


# ---------------------------------------------------------------------------
# skewed tile pipeline


def _stage_maxima_numpy(tile_lat, tiles):
    n_stages = int((tiles + np.arange(len(tiles))).max())
    out = np.zeros(n_stages, dtype=np.int64)
    for j in range(len(tiles)):
        seg = out[j:j + tiles[j]]
        np.maximum(seg, tile_lat[j], out=seg)
    return out


if HAVE_NUMBA:
    @njit(cache=True)
    def _stage_maxima_jit(tile_lat, tiles):
        n_stages = 0
        for j in range(tiles.shape[0]):
            if tiles[j] + j > n_stages:
                n_stages = tiles[j] + j
        out = np.zeros(n_stages, dtype=np.int64)
        for j in range(tiles.shape[0]):
            for s in range(j, j + tiles[j]):
                if tile_lat[j] > out[s]:
                    out[s] = tile_lat[j]
        return out


def stage_maxima(tile_lat, tiles, backend=None):
    """Per-stage slowest-active-CE latency for CE j active in stages j .. j+T_j-1 (0-based)."""
    tile_lat = np.ascontiguousarray(tile_lat, dtype=np.int64)
    tiles = np.ascontiguousarray(tiles, dtype=np.int64)
    if (backend or BACKEND) == "numba":
        return _stage_maxima_jit(tile_lat, tiles)
    return _stage_maxima_numpy(tile_lat, tiles)


# ---------------------------------------------------------------------------
# simulator block walk


def _walk_blocks_numpy(F, rows, OW, red, pf, ph, pw):
    f_lanes = np.minimum(pf, F - np.arange(0, F, pf))
    h_lanes = np.minimum(ph, rows - np.arange(0, rows, ph))
    w_lanes = np.minimum(pw, OW - np.arange(0, OW, pw))
    steps = len(f_lanes) * len(h_lanes) * len(w_lanes)
    lanes = int(f_lanes.sum()) * int(h_lanes.sum()) * int(w_lanes.sum())
    return steps * red, lanes * red


if HAVE_NUMBA:
    @njit(cache=True)
    def _walk_blocks_jit(F, rows, OW, red, pf, ph, pw):
        cycles = 0
        work = 0
        for f0 in range(0, F, pf):
            fl = min(pf, F - f0)
            for h0 in range(0, rows, ph):
                hl = min(ph, rows - h0)
                for w0 in range(0, OW, pw):
                    wl = min(pw, OW - w0)
                    cycles += red
                    work += fl * hl * wl * red
        return cycles, work


def walk_blocks(F, rows, OW, red, pf, ph, pw, backend=None):
    """Walk every PE-array step of an output-stationary tile.

    Returns (cycles, useful MACs). ``red`` is the number of reduction steps
    per output block (reduction depth x kernel area).
    """
    if (backend or BACKEND) == "numba":
        c, w = _walk_blocks_jit(int(F), int(rows), int(OW), int(red), int(pf), int(ph), int(pw))
        return int(c), int(w)
    return _walk_blocks_numpy(int(F), int(rows), int(OW), int(red), int(pf), int(ph), int(pw))
