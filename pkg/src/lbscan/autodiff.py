"""Reverse-mode gradients for the scan variants, plus the training loop.

The adjoint of the forward linear recurrence is itself a linear recurrence
run in the opposite direction, and the adjoint of the tile-local backward
pass is a tile-local forward pass, so both fit the same tiled per-lane
kernel shape as the engine.  Hidden states are not cached across the
primal/adjoint boundary: the kernel stores one entry state per tile and
recomputes in-tile states on the fly, keeping extra memory at O(L/M + M)
per lane.

Derivation sketch, per (b, e, n) lane with g_t = c_t * gy_t:

* forward part ``h_t = a_t h_{t-1} + b_t``:
  ``lam_t = g_t + a_{t+1} lam_{t+1}``; ``d/db_t = lam_t``;
  ``d/da_t = lam_t h_{t-1}``.
* tile-local part ``r_i = a_i (r_{i+1} + b_{i+1})`` with ``r = 0`` at tile
  ends: ``v_i = g_i + a_{i-1} v_{i-1}`` ascending within the tile;
  ``d/da_i += v_i (r_{i+1} + b_{i+1})``; ``d/db_{i+1} += a_i v_i``.
* ``d/dc_t[n] = sum_e gy_t[e] (h + r)_t[e,n]``; ``d/ddx = gy``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))

import numpy as np
from numba import config as _numba_config
from numba import njit, prange, set_num_threads

from .core import ScanParams, ShapeError, check_shape

_GRAD_EBLOCK = 32


@dataclass
class GradBundle:
    """Gradients w.r.t. the four scan inputs, same shapes as the primals."""

    abar: np.ndarray
    bx: np.ndarray
    c: np.ndarray
    dx: np.ndarray


@njit(parallel=True, cache=True)
def _scan_grad_kernel(a2, b2, c, gy, N, m, do_local, ga2, gb2, gc_part, eblk):
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

        hp = np.empty((T, W), np.float64)  # per-tile entry states
        h = np.zeros(W, np.float64)
        abuf = np.empty((m, W), np.float64)
        bbuf = np.empty((m, W), np.float64)
        gbuf = np.empty((m, W), np.float64)
        hbuf = np.empty((m, W), np.float64)
        rbuf = np.empty((m, W), np.float64)
        lam = np.zeros(W, np.float64)
        prev_a = np.zeros(W, np.float64)
        vprev = np.zeros(W, np.float64)

        # recompute pass: tile entry states only
        for t in range(T):
            lo = t * m
            hi = min(L, lo + m)
            for w in range(W):
                hp[t, w] = h[w]
            for l in range(lo, hi):
                for w in range(W):
                    h[w] = a2[b, l, w0 + w] * h[w] + b2[b, l, w0 + w]

        if not do_local:
            for j in range(m):
                for w in range(W):
                    rbuf[j, w] = 0.0

        # adjoint pass: tiles in reverse, in-tile states recomputed
        for t in range(T - 1, -1, -1):
            lo = t * m
            hi = min(L, lo + m)
            r = hi - lo
            for j in range(r):
                l = lo + j
                for w in range(W):
                    abuf[j, w] = a2[b, l, w0 + w]
                    bbuf[j, w] = b2[b, l, w0 + w]
                for ee in range(e0, e1):
                    base = (ee - e0) * N
                    g_out = gy[b, l, ee]
                    for n in range(N):
                        gbuf[j, base + n] = c[b, l, n] * g_out
            for w in range(W):
                h[w] = hp[t, w]
            for j in range(r):
                for w in range(W):
                    h[w] = abuf[j, w] * h[w] + bbuf[j, w]
                    hbuf[j, w] = h[w]
            if do_local:
                for w in range(W):
                    rbuf[r - 1, w] = 0.0
                for j in range(r - 2, -1, -1):
                    for w in range(W):
                        rbuf[j, w] = abuf[j, w] * (rbuf[j + 1, w] + bbuf[j + 1, w])

            # gradient w.r.t. the output-mixing coefficients
            for j in range(r):
                l = lo + j
                for ee in range(e0, e1):
                    base = (ee - e0) * N
                    g_out = gy[b, l, ee]
                    for n in range(N):
                        w = base + n
                        gc_part[item, l, n] += g_out * (hbuf[j, w] + rbuf[j, w])

            # forward-part adjoint: reversed recurrence over the tile
            for j in range(r - 1, 0, -1):
                l = lo + j
                for w in range(W):
                    lam[w] = gbuf[j, w] + prev_a[w] * lam[w]
                    gb2[b, l, w0 + w] += lam[w]
                    ga2[b, l, w0 + w] += lam[w] * hbuf[j - 1, w]
                    prev_a[w] = abuf[j, w]
            for w in range(W):
                lam[w] = gbuf[0, w] + prev_a[w] * lam[w]
                gb2[b, lo, w0 + w] += lam[w]
                ga2[b, lo, w0 + w] += lam[w] * hp[t, w]
                prev_a[w] = abuf[0, w]

            # tile-local-part adjoint: forward recurrence within the tile
            if do_local:
                if r > 1:
                    for w in range(W):
                        vprev[w] = gbuf[0, w]
                        ga2[b, lo, w0 + w] += vprev[w] * (rbuf[1, w] + bbuf[1, w])
                else:
                    for w in range(W):
                        vprev[w] = gbuf[0, w]
                for j in range(1, r - 1):
                    l = lo + j
                    for w in range(W):
                        inj = abuf[j - 1, w] * vprev[w]
                        gb2[b, l, w0 + w] += inj
                        v = gbuf[j, w] + inj
                        ga2[b, l, w0 + w] += v * (rbuf[j + 1, w] + bbuf[j + 1, w])
                        vprev[w] = v
                if r > 1:
                    l = lo + r - 1
                    for w in range(W):
                        gb2[b, l, w0 + w] += abuf[r - 2, w] * vprev[w]


def _grad_run(abar, bx, c, gy, M, do_local, workers):
    abar = np.ascontiguousarray(abar)
    if abar.dtype not in (np.float32, np.float64):
        abar = abar.astype(np.float64)
    dt = abar.dtype
    bx = np.ascontiguousarray(bx, dtype=dt)
    c = np.ascontiguousarray(c, dtype=dt)
    gy = np.ascontiguousarray(gy, dtype=dt)
    if abar.ndim != 4:
        raise ShapeError(f"abar must be (B, L, E, N), got {abar.shape}")
    B, L, E, N = abar.shape
    check_shape(bx, (B, L, E, N), "bx")
    check_shape(c, (B, L, N), "c")
    check_shape(gy, (B, L, E), "gy")
    if M < 1:
        raise ShapeError(f"tile length must be >= 1, got {M}")
    eblk = min(E, _GRAD_EBLOCK)
    nblk = -(-E // eblk)
    ga = np.zeros((B, L, E * N), dt)
    gb = np.zeros((B, L, E * N), dt)
    gc_part = np.zeros((B * nblk, L, N), dt)
    set_num_threads(min(max(workers, 1), _numba_config.NUMBA_NUM_THREADS))
    _scan_grad_kernel(
        abar.reshape(B, L, E * N), bx.reshape(B, L, E * N), c, gy,
        N, M, do_local, ga, gb, gc_part, eblk,
    )
    gc = gc_part.reshape(B, nblk, L, N).sum(axis=1)
    return ga.reshape(B, L, E, N), gb.reshape(B, L, E, N), gc


def lbm_scan_grad(abar, bx, c, dx, gy, M: int, workers: int = 1) -> GradBundle:
    """Adjoint of the locally bi-directional scan."""
    ga, gb, gc = _grad_run(abar, bx, c, gy, M, True, workers)
    return GradBundle(abar=ga, bx=gb, c=gc, dx=np.array(gy, dtype=np.float64, copy=True))


def forward_scan_grad(abar, bx, c, dx, gy, workers: int = 1) -> GradBundle:
    """Adjoint of the forward-only scan (tile-local part absent)."""
    ga, gb, gc = _grad_run(abar, bx, c, gy, 1, False, workers)
    return GradBundle(abar=ga, bx=gb, c=gc, dx=np.array(gy, dtype=np.float64, copy=True))


def global_backward_scan_grad(abar, bx, c, dx, gy, workers: int = 1) -> GradBundle:
    """Adjoint of the right-to-left sweep: forward adjoint on the reversal."""
    flip = lambda arr: np.ascontiguousarray(arr[:, ::-1])
    g = forward_scan_grad(flip(abar), flip(bx), flip(c), None, flip(gy), workers)
    return GradBundle(
        abar=flip(g.abar), bx=flip(g.bx), c=flip(g.c), dx=np.array(gy, dtype=np.float64, copy=True)
    )


def global_bidir_grad(params_f: ScanParams, params_b: ScanParams, gy, workers: int = 1):
    """Gradients for both parameter sets of the bi-directional baseline."""
    gf = forward_scan_grad(params_f.abar, params_f.bx, params_f.c, params_f.dx, gy, workers)
    gb = global_backward_scan_grad(params_b.abar, params_b.bx, params_b.c, params_b.dx, gy, workers)
    return gf, gb


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup followed by cosine annealing to zero."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    frac = min(max(frac, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.05,
) -> None:
    """Decoupled-weight-decay Adam update, in place."""
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


@dataclass
class TrainHyper:
    base_lr: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 1000
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainState:
    params: dict
    opt: AdamWState
    step: int = 0


def train_step(state: TrainState, images, labels, cfg, hyper: TrainHyper):
    """One optimisation step: forward, loss, backward, AdamW update.

    Returns (loss, accuracy).  Raises FloatingPointError on a non-finite
    loss so callers can stop with diagnostics.
    """
    from . import model as model_mod

    logits, cache = model_mod.model_forward_cached(images, cfg, state.params)
    from .nn import cross_entropy

    loss, g_logits, acc = cross_entropy(logits, labels, hyper.label_smoothing)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    grads, _ = model_mod.model_backward(cache, g_logits, cfg, state.params)
    lr = cosine_lr(state.step, hyper.total_steps, hyper.base_lr, hyper.warmup_steps)
    adamw_step(
        state.params, grads, state.opt, lr,
        beta1=hyper.beta1, beta2=hyper.beta2, weight_decay=hyper.weight_decay,
    )
    state.step += 1
    return loss, acc
