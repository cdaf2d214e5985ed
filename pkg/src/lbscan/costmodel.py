"""Analytic FLOP and memory-traffic model for the scan variants.

The counters model the machine the engine emulates, not the host: HBM
traffic is counted as unique element loads/stores (tiles are fetched into
"registers" once), tile exchanges are the serial prefix hand-offs between
consecutive tiles of one lane, and everything else is register work.  The
engine tallies the same quantities at its executed loop sites, and the two
must agree exactly; `count_scan_cost` is the closed-form prediction.

FLOP convention: one multiply or add is 1, a multiply-add is 2;
exp / softplus / SiLU / GELU count as 4.  Ratios between variants, which
are what the acceptance targets pin down, do not depend on the constants.

The globally bi-directional baseline is defined as exactly two standalone
sweeps: every counter is twice the forward value, and the final elementwise
merge of the two output streams is not attributed to either sweep.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .core import ShapeError

ELEMWISE_FLOPS = 4  # exp, softplus, SiLU, GELU


@dataclass
class CostReport:
    """Counter bundle for one scan call or one model forward."""

    variant: str
    flops: int = 0
    hbm_reads: int = 0
    hbm_writes: int = 0
    tile_exchanges: int = 0
    register_ops: int = 0
    breakdown: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("flops", "hbm_reads", "hbm_writes", "tile_exchanges", "register_ops"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def __add__(self, other: "CostReport") -> "CostReport":
        merged = dict(self.breakdown)
        for k, v in other.breakdown.items():
            merged[k] = merged.get(k, 0) + v
        return CostReport(
            variant=self.variant if self.variant == other.variant else f"{self.variant}+{other.variant}",
            flops=self.flops + other.flops,
            hbm_reads=self.hbm_reads + other.hbm_reads,
            hbm_writes=self.hbm_writes + other.hbm_writes,
            tile_exchanges=self.tile_exchanges + other.tile_exchanges,
            register_ops=self.register_ops + other.register_ops,
            breakdown=merged,
        )

    def counters(self) -> dict:
        return {
            "flops": self.flops,
            "hbm_reads": self.hbm_reads,
            "hbm_writes": self.hbm_writes,
            "tile_exchanges": self.tile_exchanges,
            "register_ops": self.register_ops,
        }


def _tile_lengths(L: int, M: int) -> tuple[int, int, int]:
    """(number of full tiles, full tile length, ragged tail length)."""
    full = L // M
    tail = L - full * M
    return full, M, tail


def _backward_flops_per_lane(L: int, M: int) -> int:
    """In-tile reverse pass cost for one (b, e, n) lane.

    Per tile of length r >= 2: (r-1) decay multiplies, (r-1) state-sum adds,
    and (r-2) injection adds plus one direct assignment at the tile end,
    i.e. 3r - 4.  Length-1 tiles reduce to the forward scan and cost nothing.
    """
    full, m, tail = _tile_lengths(L, M)
    ops = full * (3 * m - 4) if m >= 2 else 0
    if tail >= 2:
        ops += 3 * tail - 4
    return ops


def count_scan_cost(variant: str, B: int, L: int, E: int, N: int, M: int) -> CostReport:
    """Closed-form cost of one engine call with the given dims.

    Phases per lane: in-tile pair scan (3 flops/element), serial exclusive
    pair scan over the T = ceil(L/M) tile aggregates (3 flops per hand-off),
    prefix application as a second seeded pair scan (3 flops/element), and
    the output stage (2N + 1 flops per (b, l, e)).  The locally backward
    variant adds only in-register work; the bi-directional baseline is two
    full sweeps.
    """
    if min(B, L, E, N, M) < 1:
        raise ShapeError("all dimensions and the tile length must be >= 1")
    lanes = B * E * N
    T = -(-L // M)
    intile = 3 * L * lanes
    exchange = 3 * (T - 1) * lanes
    apply = 3 * L * lanes
    output = (2 * N + 1) * L * B * E
    forward_flops = intile + exchange + apply + output
    reads = 2 * L * lanes + L * B * N + L * B * E
    writes = L * B * E + B * E * N
    exchanges = (T - 1) * lanes

    if variant == "forward":
        flops = forward_flops
        backward = 0
        scale = 1
    elif variant == "lbm":
        backward = _backward_flops_per_lane(L, M) * lanes
        flops = forward_flops + backward
        scale = 1
    elif variant == "global_bidir":
        backward = 0
        flops = 2 * forward_flops
        scale = 2
    else:
        raise ValueError(f"unknown variant {variant!r}")

    exchange_total = scale * exchange
    return CostReport(
        variant=variant,
        flops=flops,
        hbm_reads=scale * reads,
        hbm_writes=scale * writes,
        tile_exchanges=scale * exchanges,
        register_ops=flops - exchange_total,
        breakdown={
            "intile": scale * intile,
            "exchange": exchange_total,
            "apply": scale * apply,
            "backward": backward,
            "output": scale * output,
        },
    )


def _linear_flops(L: int, d_in: int, d_out: int) -> int:
    return 2 * d_in * d_out * L


def count_model_cost(config) -> CostReport:
    """Per-image FLOPs of the backbone + head, summed over blocks.

    Projections and the scan dominate; normalisation, gating and elementwise
    activations are included for completeness.  Scan cost reuses
    :func:`count_scan_cost` with the configured variant (M = 1 degenerates
    to the forward-only scan).
    """
    D, E, N, U = config.embed_dim, config.inner_dim, config.state_dim, config.depth
    L = config.seq_len
    M = config.resolved_tile_len
    k = config.conv_width
    patch_in = config.patch_size * config.patch_size * config.in_channels

    flops = _linear_flops(config.num_patches, patch_in, D) + L * D  # embed + pos add
    per_block = 0
    per_block += L * (4 * D + 6)  # rms norm: square+sum, scale, 1/sqrt
    per_block += _linear_flops(L, D, E) * 2  # x and z projections
    per_block += L * E * (2 * k)  # depthwise causal conv
    per_block += L * E * ELEMWISE_FLOPS  # SiLU on conv output
    per_block += _linear_flops(L, E, N) * 2  # B and C projections
    per_block += _linear_flops(L, E, E) + L * E  # delta projection + bias
    per_block += L * E * ELEMWISE_FLOPS  # softplus
    per_block += L * E * N * (1 + ELEMWISE_FLOPS)  # abar = exp(delta*A)
    per_block += L * E * N * 2  # bx = (delta x B) * x
    per_block += L * E  # dx = D_param * x
    scan = count_scan_cost(config.scan_variant, 1, L, E, N, M)
    per_block += scan.flops
    per_block += L * E * (ELEMWISE_FLOPS + 1)  # gate y * SiLU(z)
    per_block += _linear_flops(L, E, D) + L * D  # out projection + residual
    flops += U * per_block

    if config.head == "gap":
        flops += L * D  # pooling
    else:
        dh = D // config.map_heads
        flops += _linear_flops(L, D, D) * 2  # K and V
        flops += L * D * 2  # query scores
        flops += L * config.map_heads * ELEMWISE_FLOPS  # softmax
        flops += L * D * 2  # weighted pooling
        flops += dh * 0
    hidden = 4 * D
    flops += _linear_flops(1, D, hidden) + hidden * ELEMWISE_FLOPS
    flops += _linear_flops(1, hidden, config.num_classes)

    report = CostReport(variant=config.scan_variant, flops=flops)
    report.hbm_reads = scan.hbm_reads * U
    report.hbm_writes = scan.hbm_writes * U
    report.tile_exchanges = scan.tile_exchanges * U
    report.register_ops = flops - (scan.breakdown["exchange"] * U)
    report.breakdown = {"per_block": per_block, "scan_per_block": scan.flops}
    return report


def reports_to_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    buf.write("variant,flops,hbm_reads,hbm_writes,tile_exchanges,register_ops\n")
    for r in reports:
        buf.write(
            f"{r.variant},{r.flops},{r.hbm_reads},{r.hbm_writes},"
            f"{r.tile_exchanges},{r.register_ops}\n"
        )
    return buf.getvalue()


def format_table(reports: list[CostReport]) -> str:
    headers = ["variant", "flops", "hbm_reads", "hbm_writes", "tile_exchanges", "register_ops"]
    rows = [
        [r.variant, r.flops, r.hbm_reads, r.hbm_writes, r.tile_exchanges, r.register_ops]
        for r in reports
    ]
    widths = [max(len(str(h)), *(len(str(row[i])) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)
