"""Tiled work-efficient parallel scan mirroring a GPU thread/register model.

The sequence is cut into tiles of M elements.  Each (batch, channel-block)
work item runs three phases per lane, exactly the structure of the
hardware kernel being emulated:

1. an in-tile inclusive scan of (decay, state) pairs, keeping the running
   pair as the tile aggregate (aggregates accumulate in float64 on the
   single-precision path - long products of decays underflow in float32);
2. a serial exclusive pair scan over the tile aggregates in fixed
   left-to-right order, producing each tile's prefix ("the exchange");
3. a second pass over each tile seeded with its prefix pair, which
   completes the global scan and streams the outputs.

The locally bi-directional variant adds, between phase 3's rescan and the
output stage, a reverse exclusive scan over the tile slab that is already
resident in the per-tile buffers - no extra tile exchange and no extra
element loads, which is the whole point of the operator.  The globally
bi-directional baseline simply runs phase 1-3 twice, the second time with
reversed indexing, and sums the streams.

Work is partitioned over workers along flattened (batch x channel-block)
items; every lane's arithmetic is independent of the partition, so outputs
are bit-identical for any worker count.  Each call tallies the cost-model
counters at the executed loop sites; see `costmodel` for the counter
semantics (they model the emulated machine, so the phase-3 reload of tile
elements counts as register reuse, not HBM traffic).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

# Must precede the numba import (see lbscan.__init__).
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))

import numpy as np
from numba import config as _numba_config
from numba import njit, prange, set_num_threads

from .core import OracleOutput, ScanParams, ShapeError, check_shape
from .costmodel import CostReport

# Lane-block widths per dtype, sized so the three per-tile slabs stay
# near-L1-resident for M = 16 (the fused backward pass re-walks them)
# while leaving enough items for load balance.
_EBLOCK = {np.dtype(np.float32): 16, np.dtype(np.float64): 8}

# Counter slots written per work item.
_C_INTILE, _C_EXCH, _C_APPLY, _C_BACK, _C_OUT, _C_READS, _C_WRITES, _C_EVENTS = range(8)


def select_tile_len(L: int) -> int:
    """Elements per worker-tile as a function of sequence length."""
    if L < 1:
        raise ShapeError(f"sequence length must be >= 1, got {L}")
    if L > 256:
        return 16
    if L > 128:
        return 8
    return 4


@dataclass(frozen=True)
class TilePlan:
    """Tiling of a length-L sequence into worker tiles, combined left to right."""

    tile_len: int
    num_tiles: int

    @classmethod
    def for_length(cls, L: int, tile_len: int | None = None) -> "TilePlan":
        if L < 1:
            raise ShapeError(f"sequence length must be >= 1, got {L}")
        m = select_tile_len(L) if tile_len in (None, "auto") else int(tile_len)
        if m < 1:
            raise ShapeError(f"tile length must be >= 1, got {m}")
        return cls(tile_len=m, num_tiles=-(-L // m))

    def check(self, L: int) -> None:
        if self.num_tiles != -(-L // self.tile_len):
            raise ShapeError(
                f"plan ({self.tile_len} x {self.num_tiles}) inconsistent with L={L}"
            )


@njit(parallel=True, cache=True)
def _scan_kernel(a2, b2, c, dx, N, m, do_backward, reverse, y_out, hfin2, counters, eblk):
    B, L, EN = a2.shape
    E = EN // N
    T = (L + m - 1) // m
    nblk = (E + eblk - 1) // eblk
    for item in prange(B * nblk):
        b = item // nblk
        e0 = (item % nblk) * eblk
        e1 = min(E, e0 + eblk)
        w0 = e0 * N
        W = e1 * N - w0

        pfx_a = np.ones(W, np.float64)  # running exclusive prefix pair
        pfx_b = np.zeros(W, np.float64)
        sa = np.empty(W, a2.dtype)
        sb = np.empty(W, a2.dtype)
        ra = np.empty(W, a2.dtype)
        rb = np.empty(W, a2.dtype)
        hb = np.empty(W, a2.dtype)
        abuf = np.empty((m, W), a2.dtype)
        bbuf = np.empty((m, W), a2.dtype)
        hbuf = np.empty((m, W), a2.dtype)

        f_intile = 0
        f_exch = 0
        f_apply = 0
        f_back = 0
        f_out = 0
        reads = 0
        writes = 0
        events = 0

        # one sweep over the tiles; each tile is fetched into its register-
        # model slab exactly once and every later phase works on the slab
        for t in range(T):
            lo = t * m
            hi = min(L, lo + m)
            r = hi - lo

            # phase 1: in-tile inclusive pair scan; final pair = aggregate
            for w in range(W):
                sa[w] = 1.0
                sb[w] = 0.0
            for j in range(r):
                src = L - 1 - (lo + j) if reverse else lo + j
                for w in range(W):
                    a = a2[b, src, w0 + w]
                    v = b2[b, src, w0 + w]
                    abuf[j, w] = a
                    bbuf[j, w] = v
                    sa[w] = sa[w] * a
                    sb[w] = a * sb[w] + v
                f_intile += 3 * W
                reads += 2 * W

            # phase 3: rescan the slab seeded with this tile's prefix
            for w in range(W):
                ra[w] = pfx_a[w]
                rb[w] = pfx_b[w]
            for j in range(r):
                for w in range(W):
                    a = abuf[j, w]
                    ra[w] = ra[w] * a
                    rb[w] = a * rb[w] + bbuf[j, w]
                    hbuf[j, w] = rb[w]
                f_apply += 3 * W

            # phase 2: advance the running prefix with the tile aggregate in
            # float64, fixed left-to-right order (the exchange); the update
            # after the final tile would be dead work and is skipped
            if t < T - 1:
                for w in range(W):
                    ag = np.float64(sa[w])
                    pfx_b[w] = ag * pfx_b[w] + np.float64(sb[w])
                    pfx_a[w] = ag * pfx_a[w]
                f_exch += 3 * W
                events += W

            # in-tile backward pass on the register-model slab (lbm only)
            if do_backward and r > 1:
                for w in range(W):
                    hb[w] = bbuf[r - 1, w]
                for j in range(r - 2, 0, -1):
                    for w in range(W):
                        dec = abuf[j, w] * hb[w]
                        hbuf[j, w] = hbuf[j, w] + dec
                        hb[w] = dec + bbuf[j, w]
                    f_back += 3 * W
                for w in range(W):
                    hbuf[0, w] = hbuf[0, w] + abuf[0, w] * hb[w]
                f_back += 2 * W

            # output stage
            for j in range(r):
                src = L - 1 - (lo + j) if reverse else lo + j
                for ee in range(e0, e1):
                    base = (ee - e0) * N
                    a0 = a2.dtype.type(0.0)
                    a1 = a2.dtype.type(0.0)
                    a2_ = a2.dtype.type(0.0)
                    a3 = a2.dtype.type(0.0)
                    n = 0
                    while n + 4 <= N:
                        a0 = a0 + c[b, src, n] * hbuf[j, base + n]
                        a1 = a1 + c[b, src, n + 1] * hbuf[j, base + n + 1]
                        a2_ = a2_ + c[b, src, n + 2] * hbuf[j, base + n + 2]
                        a3 = a3 + c[b, src, n + 3] * hbuf[j, base + n + 3]
                        n += 4
                    while n < N:
                        a0 = a0 + c[b, src, n] * hbuf[j, base + n]
                        n += 1
                    y_out[b, src, ee] = ((a0 + a1) + (a2_ + a3)) + dx[b, src, ee]
                f_out += (2 * N + 1) * (e1 - e0)
                if e0 == 0:
                    reads += N
                reads += e1 - e0
                writes += e1 - e0

        for w in range(W):
            hfin2[b, w0 + w] = rb[w]
        writes += W

        counters[item, 0] = f_intile
        counters[item, 1] = f_exch
        counters[item, 2] = f_apply
        counters[item, 3] = f_back
        counters[item, 4] = f_out
        counters[item, 5] = reads
        counters[item, 6] = writes
        counters[item, 7] = events


def _prepare(abar, bx, c, dx, plan: TilePlan):
    abar = np.ascontiguousarray(abar)
    if abar.ndim != 4:
        raise ShapeError(f"abar must be (B, L, E, N), got {abar.shape}")
    if abar.dtype not in (np.float32, np.float64):
        abar = abar.astype(np.float64)
    B, L, E, N = abar.shape
    dt = abar.dtype
    bx = np.ascontiguousarray(bx, dtype=dt)
    c = np.ascontiguousarray(c, dtype=dt)
    dx = np.ascontiguousarray(dx, dtype=dt)
    check_shape(bx, (B, L, E, N), "bx")
    check_shape(c, (B, L, N), "c")
    check_shape(dx, (B, L, E), "dx")
    plan.check(L)
    return abar, bx, c, dx


def _apply_workers(workers: int) -> None:
    if workers < 1:
        raise ShapeError(f"workers must be >= 1, got {workers}")
    set_num_threads(min(workers, _numba_config.NUMBA_NUM_THREADS))


def _report(counters: np.ndarray, variant: str, scale_merge: bool = False) -> CostReport:
    tot = counters.sum(axis=0)
    flops = int(tot[_C_INTILE] + tot[_C_EXCH] + tot[_C_APPLY] + tot[_C_BACK] + tot[_C_OUT])
    return CostReport(
        variant=variant,
        flops=flops,
        hbm_reads=int(tot[_C_READS]),
        hbm_writes=int(tot[_C_WRITES]),
        tile_exchanges=int(tot[_C_EVENTS]),
        register_ops=flops - int(tot[_C_EXCH]),
        breakdown={
            "intile": int(tot[_C_INTILE]),
            "exchange": int(tot[_C_EXCH]),
            "apply": int(tot[_C_APPLY]),
            "backward": int(tot[_C_BACK]),
            "output": int(tot[_C_OUT]),
        },
    )


def _run(abar, bx, c, dx, plan, workers, do_backward, reverse, variant) -> OracleOutput:
    abar, bx, c, dx = _prepare(abar, bx, c, dx, plan)
    B, L, E, N = abar.shape
    dt = abar.dtype
    eblk = min(E, _EBLOCK[dt])
    nblk = -(-E // eblk)
    y = np.empty((B, L, E), dt)
    hfin = np.empty((B, E * N), dt)
    counters = np.zeros((B * nblk, 8), np.int64)
    _apply_workers(workers)
    _scan_kernel(
        abar.reshape(B, L, E * N),
        bx.reshape(B, L, E * N),
        c,
        dx,
        N,
        plan.tile_len,
        do_backward,
        reverse,
        y,
        hfin,
        counters,
        eblk,
    )
    return OracleOutput(
        y=y, h_final=hfin.reshape(B, E, N), cost=_report(counters, variant)
    )


def forward_scan_par(abar, bx, c, dx, plan: TilePlan, workers: int = 1) -> OracleOutput:
    """Parallel forward scan; equals `oracle.forward_scan_seq` up to rounding."""
    return _run(abar, bx, c, dx, plan, workers, False, False, "forward")


def lbm_scan_par(abar, bx, c, dx, plan: TilePlan, workers: int = 1) -> OracleOutput:
    """Locally bi-directional scan: forward phases plus the fused in-tile
    reverse pass; equals `oracle.lbm_scan_seq` up to rounding."""
    return _run(abar, bx, c, dx, plan, workers, True, False, "lbm")


def global_bidir_par(
    params_f: ScanParams, params_b: ScanParams, plan: TilePlan, workers: int = 1
) -> OracleOutput:
    """Globally bi-directional baseline: two full sweeps, summed.

    The second sweep indexes the sequence in reverse inside the kernel, so
    no flipped copies are made.  Counters are the sum of the two sweeps;
    the final merge add is not attributed (the model defines this variant
    as exactly twice the forward cost).
    """
    fwd = _run(
        params_f.abar, params_f.bx, params_f.c, params_f.dx,
        plan, workers, False, False, "global_bidir",
    )
    bwd = _run(
        params_b.abar, params_b.bx, params_b.c, params_b.dx,
        plan, workers, False, True, "global_bidir",
    )
    return OracleOutput(
        y=fwd.y + bwd.y,
        h_final=fwd.h_final + bwd.h_final,
        cost=fwd.cost + bwd.cost,
    )
