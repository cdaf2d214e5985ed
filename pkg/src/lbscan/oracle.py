"""Sequential reference implementations of every scan variant.

Deliberately naive: plain double-precision loops over timesteps, one numpy
op per line.  Everything else in the package (the tiled parallel engine,
the analytic gradients, the encoder block) is tested against this module,
so it favours obviousness over speed.
"""

from __future__ import annotations

import numpy as np

from .core import (
    NonFiniteError,
    OracleOutput,
    ScanParams,
    ShapeError,
    check_finite,
    check_shape,
)


def _validated(abar, bx, c, dx):
    abar = np.asarray(abar, dtype=np.float64)
    bx = np.asarray(bx, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    if abar.ndim != 4:
        raise ShapeError(f"abar must be (B, L, E, N), got {abar.shape}")
    B, L, E, N = abar.shape
    check_shape(bx, (B, L, E, N), "bx")
    check_shape(c, (B, L, N), "c")
    check_shape(dx, (B, L, E), "dx")
    for name, arr in (("abar", abar), ("bx", bx), ("c", c), ("dx", dx)):
        check_finite(arr, name)
    return abar, bx, c, dx


def forward_scan_seq(abar, bx, c, dx, return_states: bool = False) -> OracleOutput:
    """Left-to-right recurrence ``h_t = abar_t * h_{t-1} + bx_t`` with
    ``h_0 = 0`` and output ``y_t[e] = sum_n c_t[n] h_t[e,n] + dx_t[e]``."""
    abar, bx, c, dx = _validated(abar, bx, c, dx)
    B, L, E, N = abar.shape
    h = np.zeros((B, E, N))
    y = np.empty((B, L, E))
    states = np.empty((B, L, E, N)) if return_states else None
    for t in range(L):
        h = abar[:, t] * h + bx[:, t]
        if return_states:
            states[:, t] = h
        y[:, t] = np.einsum("ben,bn->be", h, c[:, t]) + dx[:, t]
    return OracleOutput(y=y, h_final=h, per_step_h=states)


def global_backward_scan_seq(abar, bx, c, dx, return_states: bool = False) -> OracleOutput:
    """Right-to-left mirror of :func:`forward_scan_seq`: scans ``t = L..1``
    with ``h_t = abar_t * h_{t+1} + bx_t`` and ``h_{L+1} = 0``."""
    abar, bx, c, dx = _validated(abar, bx, c, dx)
    B, L, E, N = abar.shape
    h = np.zeros((B, E, N))
    y = np.empty((B, L, E))
    states = np.empty((B, L, E, N)) if return_states else None
    for t in range(L - 1, -1, -1):
        h = abar[:, t] * h + bx[:, t]
        if return_states:
            states[:, t] = h
        y[:, t] = np.einsum("ben,bn->be", h, c[:, t]) + dx[:, t]
    return OracleOutput(y=y, h_final=h, per_step_h=states)


def global_bidir_seq(params_f: ScanParams, params_b: ScanParams) -> OracleOutput:
    """Two independent sweeps (separate parameter sets per direction),
    outputs summed elementwise.  The final states of the two sweeps live at
    opposite ends of the sequence; ``h_final`` is their sum."""
    fwd = forward_scan_seq(params_f.abar, params_f.bx, params_f.c, params_f.dx)
    bwd = global_backward_scan_seq(params_b.abar, params_b.bx, params_b.c, params_b.dx)
    return OracleOutput(y=fwd.y + bwd.y, h_final=fwd.h_final + bwd.h_final)


def local_backward_scan_seq(abar, bx, M: int) -> np.ndarray:
    """Tile-local backward state in exclusive form, shape ``(B, L, E, N)``.

    Scanning ``i = L-1 .. 0`` with the *forward* parameters:

    * the state resets to zero whenever ``(i + 1) % M == 0`` (tile ends);
      a ragged final tile is covered by the zero initialisation
    * the value recorded at ``i`` is the state *before* its own ``bx_i`` is
      added, so the record at every tile end is exactly zero

    The recorded value is the inclusive backward state minus the element's
    own injection, which is the form whose sum with the forward state gives
    the locally bi-directional output.
    """
    abar = np.asarray(abar, dtype=np.float64)
    bx = np.asarray(bx, dtype=np.float64)
    if abar.shape != bx.shape or abar.ndim != 4:
        raise ShapeError(f"abar/bx must share a (B, L, E, N) shape, got {abar.shape} vs {bx.shape}")
    if not isinstance(M, (int, np.integer)) or M < 1:
        raise ShapeError(f"tile length M must be a positive integer, got {M!r}")
    check_finite(abar, "abar")
    check_finite(bx, "bx")
    B, L, E, N = abar.shape
    rec = np.empty((B, L, E, N))
    h = np.zeros((B, E, N))
    for i in range(L - 1, -1, -1):
        if (i + 1) % M == 0:
            h = np.zeros((B, E, N))
        else:
            h = abar[:, i] * h
        rec[:, i] = h
        h = h + bx[:, i]
    return rec


def lbm_scan_seq(abar, bx, c, dx, M: int, return_states: bool = False) -> OracleOutput:
    """Locally bi-directional scan: forward state plus the exclusive
    tile-local backward state, mixed through the shared ``c``/``dx``.

    At tile-end indices the backward record is zero, so the output there
    equals the forward-only output; with ``M = 1`` every index is a tile
    end and the whole scan degenerates to :func:`forward_scan_seq`.
    """
    abar, bx, c, dx = _validated(abar, bx, c, dx)
    fwd = forward_scan_seq(abar, bx, c, dx, return_states=True)
    rec = local_backward_scan_seq(abar, bx, M)
    h_sum = fwd.per_step_h + rec
    y = np.einsum("blen,bln->ble", h_sum, c) + dx
    states = h_sum if return_states else None
    return OracleOutput(y=y, h_final=fwd.h_final, per_step_h=states)


def tile_end(i: int, L: int, M: int) -> int:
    """Last index of the tile containing ``i``: ``min(L-1, M*(i//M + 1) - 1)``.

    The single-scan receptive field of output ``i`` is exactly the index
    range ``[0, tile_end(i)]``.
    """
    return min(L - 1, M * (i // M + 1) - 1)
