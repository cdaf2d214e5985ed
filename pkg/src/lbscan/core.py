"""Shared containers, shape conventions, RNG, and the scan monoid.

Every scan variant in this package reduces to compositions of affine maps
``h -> a*h + b`` over a hidden state.  ``ScanElement`` is one such map and
``combine`` is the (associative, non-commutative) composition that parallel
scans exploit.

Array shape conventions (row-major, innermost axis last):

* sequence coefficients: ``(B, L, E, N)`` - batch, length, inner channels,
  state dims; ``N`` innermost so per-timestep broadcasts are contiguous
* output-mixing coefficients ``c``: ``(B, L, N)``
* skip term ``dx``: ``(B, L, E)``
* hidden state: ``(B, E, N)``
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """An array shape is inconsistent with the scan's contract."""


class NonFiniteError(ValueError):
    """An externally supplied array contains NaN or Inf."""


@dataclass(frozen=True)
class ScanElement:
    """Affine map ``h -> a*h + b`` for one state dimension.

    The identity element is ``(a=1, b=0)``.
    """

    a: float
    b: float

    IDENTITY = None  # populated below


ScanElement.IDENTITY = ScanElement(1.0, 0.0)


def combine(p: ScanElement, q: ScanElement) -> ScanElement:
    """Compose two scan elements: apply ``p`` first, then ``q``.

    ``(q.a*p.a, q.a*p.b + q.b)`` is the unique affine map equal to
    ``h -> q(p(h))``; it is associative, which is what allows both the tile
    aggregates and the serial prefix exchange of the parallel engine.
    """
    return ScanElement(q.a * p.a, q.a * p.b + q.b)


def combine_arrays(pa, pb, qa, qb):
    """Vectorised :func:`combine` on coefficient arrays."""
    return qa * pa, qa * pb + qb


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; identical seeds give identical streams."""
    return np.random.default_rng(np.random.PCG64(seed))


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")


def check_shape(arr: np.ndarray, shape: tuple, name: str) -> None:
    if arr.shape != shape:
        raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")


def as_float_array(arr, name: str, dtype=None) -> np.ndarray:
    """Validate an externally supplied tensor: finite, floating, >= 1 sized."""
    out = np.asarray(arr, dtype=dtype)
    if out.dtype not in (np.float32, np.float64):
        out = out.astype(np.float64)
    if out.size == 0:
        raise ShapeError(f"{name} has a zero-length dimension: {out.shape}")
    check_finite(out, name)
    return out


@dataclass
class ScanParams:
    """Per-timestep discretized recurrence coefficients for one scan call.

    ``abar`` is the state decay, ``bx`` the state injection (already
    multiplied by the input), ``c`` mixes the N state dims into each output
    channel, and ``dx`` is the skip contribution.
    """

    abar: np.ndarray  # (B, L, E, N)
    bx: np.ndarray  # (B, L, E, N)
    c: np.ndarray  # (B, L, N)
    dx: np.ndarray  # (B, L, E)

    def validate(self) -> "ScanParams":
        if self.abar.ndim != 4:
            raise ShapeError(f"abar must be (B, L, E, N), got {self.abar.shape}")
        B, L, E, N = self.abar.shape
        check_shape(self.bx, (B, L, E, N), "bx")
        check_shape(self.c, (B, L, N), "c")
        check_shape(self.dx, (B, L, E), "dx")
        for name in ("abar", "bx", "c", "dx"):
            arr = getattr(self, name)
            check_finite(arr, name)
        return self

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.abar.shape


@dataclass
class OracleOutput:
    """Result of one scan: outputs, final hidden state, optional per-step
    states, and (for the parallel engine) the instrumented cost counters."""

    y: np.ndarray  # (B, L, E)
    h_final: np.ndarray  # (B, E, N)
    per_step_h: np.ndarray | None = None  # (B, L, E, N)
    cost: "object | None" = field(default=None, repr=False)


def random_scan_params(
    rng: np.random.Generator,
    B: int,
    L: int,
    E: int,
    N: int,
    dtype=np.float64,
    abar_low: float = 0.2,
    abar_high: float = 0.99,
) -> ScanParams:
    """Random, well-conditioned scan inputs (|abar| < 1) for tests/benchmarks."""
    abar = rng.uniform(abar_low, abar_high, size=(B, L, E, N)).astype(dtype)
    bx = rng.standard_normal((B, L, E, N)).astype(dtype)
    c = rng.standard_normal((B, L, N)).astype(dtype)
    dx = rng.standard_normal((B, L, E)).astype(dtype)
    return ScanParams(abar, bx, c, dx)


def max_rel_err(got: np.ndarray, ref: np.ndarray, floor: float = 1e-30) -> float:
    """``max|got - ref|`` normalised by the largest reference magnitude.

    The infinity-norm relative error used by all oracle-equivalence checks;
    an elementwise quotient would blow up at benign near-zero crossings.
    """
    scale = max(float(np.max(np.abs(ref))), floor)
    return float(np.max(np.abs(got.astype(np.float64) - ref.astype(np.float64)))) / scale
