import numpy as np
import pytest

from lbscan.core import ScanParams, ShapeError, max_rel_err, random_scan_params, seeded_rng
from lbscan.engine import TilePlan, forward_scan_par, global_bidir_par, lbm_scan_par, select_tile_len
from lbscan.oracle import forward_scan_seq, global_bidir_seq, lbm_scan_seq

TOL = {np.float32: 1e-5, np.float64: 1e-12}


def test_select_tile_len_rule():
    assert select_tile_len(1024) == 16
    assert select_tile_len(257) == 16
    assert select_tile_len(256) == 8
    assert select_tile_len(200) == 8
    assert select_tile_len(129) == 8
    assert select_tile_len(128) == 4
    assert select_tile_len(64) == 4
    assert select_tile_len(1) == 4


def test_tile_plan_invariants():
    plan = TilePlan.for_length(1000)
    assert plan.tile_len == 16
    assert plan.num_tiles == 63
    assert plan.num_tiles * plan.tile_len >= 1000 > (plan.num_tiles - 1) * plan.tile_len
    with pytest.raises(ShapeError):
        TilePlan.for_length(10, 0)
    with pytest.raises(ShapeError):
        TilePlan.for_length(0)


def test_plan_consistency_checked():
    p = random_scan_params(seeded_rng(0), 1, 8, 2, 2, dtype=np.float32)
    bad = TilePlan(tile_len=4, num_tiles=7)
    with pytest.raises(ShapeError):
        forward_scan_par(p.abar, p.bx, p.c, p.dx, bad)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_matches_oracle(dtype):
    p = random_scan_params(seeded_rng(3), 2, 1000, 3, 4, dtype=dtype)
    plan = TilePlan.for_length(1000, 16)
    got = forward_scan_par(p.abar, p.bx, p.c, p.dx, plan, workers=2)
    ref = forward_scan_seq(p.abar, p.bx, p.c, p.dx)
    assert max_rel_err(got.y, ref.y) <= TOL[dtype]
    assert max_rel_err(got.h_final, ref.h_final) <= TOL[dtype]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_lbm_matches_oracle(dtype):
    p = random_scan_params(seeded_rng(5), 2, 1024, 3, 4, dtype=dtype)
    plan = TilePlan.for_length(1024, 16)
    got = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan, workers=2)
    ref = lbm_scan_seq(p.abar, p.bx, p.c, p.dx, 16)
    assert max_rel_err(got.y, ref.y) <= TOL[dtype]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_bidir_matches_oracle(dtype):
    pf = random_scan_params(seeded_rng(6), 2, 300, 3, 4, dtype=dtype)
    pb = random_scan_params(seeded_rng(7), 2, 300, 3, 4, dtype=dtype)
    plan = TilePlan.for_length(300, 8)
    got = global_bidir_par(pf, pb, plan, workers=2)
    ref = global_bidir_seq(pf, pb)
    assert max_rel_err(got.y, ref.y) <= TOL[dtype]


def test_bidir_zero_backward_equals_forward():
    pf = random_scan_params(seeded_rng(8), 2, 64, 2, 4, dtype=np.float64)
    pb = ScanParams(pf.abar.copy(), pf.bx.copy(), np.zeros_like(pf.c), np.zeros_like(pf.dx))
    plan = TilePlan.for_length(64, 4)
    bid = global_bidir_par(pf, pb, plan)
    fwd = forward_scan_par(pf.abar, pf.bx, pf.c, pf.dx, plan)
    np.testing.assert_array_equal(bid.y, fwd.y)


def test_workers_bit_identical():
    p = random_scan_params(seeded_rng(9), 2, 777, 3, 4, dtype=np.float32)
    plan = TilePlan.for_length(777, 16)
    base = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan, workers=1)
    for workers in (2, 4, 8):
        out = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan, workers=workers)
        np.testing.assert_array_equal(out.y, base.y)
        np.testing.assert_array_equal(out.h_final, base.h_final)
        assert out.cost.counters() == base.cost.counters()


def test_single_partial_tile():
    p = random_scan_params(seeded_rng(10), 1, 5, 2, 2, dtype=np.float64)
    plan = TilePlan.for_length(5, 16)
    assert plan.num_tiles == 1
    got = forward_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    ref = forward_scan_seq(p.abar, p.bx, p.c, p.dx)
    assert max_rel_err(got.y, ref.y) <= 1e-12


def test_lbm_m1_equals_forward_exactly():
    p = random_scan_params(seeded_rng(11), 2, 33, 2, 3, dtype=np.float64)
    plan = TilePlan.for_length(33, 1)
    lbm = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    fwd = forward_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    np.testing.assert_array_equal(lbm.y, fwd.y)
    assert lbm.cost.flops == fwd.cost.flops


def test_lbm_tile_end_bitwise_equality():
    p = random_scan_params(seeded_rng(12), 2, 29, 2, 3, dtype=np.float64)
    plan = TilePlan.for_length(29, 4)
    lbm = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    fwd = forward_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    for i in range(29):
        if (i + 1) % 4 == 0 or i == 28:
            np.testing.assert_array_equal(lbm.y[:, i], fwd.y[:, i])


def test_no_extra_exchange_or_traffic():
    p = random_scan_params(seeded_rng(13), 2, 200, 3, 4, dtype=np.float32)
    plan = TilePlan.for_length(200, 8)
    fwd = forward_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    lbm = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    assert lbm.cost.tile_exchanges == fwd.cost.tile_exchanges
    assert lbm.cost.hbm_reads == fwd.cost.hbm_reads
    assert lbm.cost.hbm_writes == fwd.cost.hbm_writes


def test_bidir_exactly_doubles_counters():
    p = random_scan_params(seeded_rng(14), 2, 160, 3, 4, dtype=np.float32)
    plan = TilePlan.for_length(160, 8)
    fwd = forward_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    bid = global_bidir_par(p, p, plan)
    for key, val in fwd.cost.counters().items():
        assert bid.cost.counters()[key] == 2 * val, key


def test_work_bound_at_m16():
    p = random_scan_params(seeded_rng(15), 1, 512, 2, 16, dtype=np.float32)
    plan = TilePlan.for_length(512, 16)
    fwd = forward_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    lbm = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan)
    assert lbm.cost.flops <= 1.35 * fwd.cost.flops


@pytest.mark.parametrize("L", [1, 2, 7, 31, 128, 129])
@pytest.mark.parametrize("M", [1, 3, 16])
def test_equivalence_grid_small(L, M):
    p = random_scan_params(seeded_rng(100 + L + M), 2, L, 2, 3, dtype=np.float64)
    plan = TilePlan.for_length(L, M)
    got = lbm_scan_par(p.abar, p.bx, p.c, p.dx, plan, workers=2)
    ref = lbm_scan_seq(p.abar, p.bx, p.c, p.dx, M)
    assert max_rel_err(got.y, ref.y) <= 1e-12
