"""Acceptance criteria; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from jumpfbsde import maxprinciple as mp
from jumpfbsde.adjoint import (EPS_DEN, KAlgebraSingularity, k_algebra, k_algebra_residual,
                               solve_first_order_adjoint, solve_second_order_adjoint)
from jumpfbsde.cli import main
from jumpfbsde.fbsolve import picard_solve
from jumpfbsde.model import builtin_problem
from jumpfbsde.noise import TimeGrid, generate_noise

EPS_LIST = [0.2, 0.1, 0.05, 0.025, 0.0125]


def _setup(problem, K, n, seed):
    grid = TimeGrid(problem.T, K)
    return grid, generate_noise(grid, problem.markspace, n, seed)


def test_criterion_01_zero_problem(record):
    start = time.perf_counter()
    pr = builtin_problem("zero")
    grid, noise = _setup(pr, 100, 10_000, 1)
    sol = picard_solve(pr, 0.0, noise)
    elapsed = time.perf_counter() - start
    worst = max(np.max(np.abs(sol.X - pr.x0)), np.max(np.abs(sol.Y)), np.max(np.abs(sol.Z)),
                np.max(np.abs(sol.Zt)))
    ok = worst <= 1e-12 and elapsed < 5.0
    assert record(1, ok, f"max |entry| {worst:.2e}, runtime {elapsed:.2f}s")


def test_criterion_02_forward_oracle(record):
    start = time.perf_counter()
    pr = builtin_problem("linear_forward", a=0.1, c=0.2, gamma=0.2, lam=1.0, x0=1.0, T=1.0)
    grid, noise = _setup(pr, 200, 200_000, 2)
    sol = picard_solve(pr, 0.0, noise)
    elapsed = time.perf_counter() - start
    xt = sol.X[-1]
    se = xt.std(ddof=1) / np.sqrt(xt.size)
    err = abs(xt.mean() - np.exp(0.1))
    ok = err <= max(3 * se, 2e-3) and elapsed < 60.0
    assert record(2, ok, f"|mean X_T - e^0.1| = {err:.2e} (SE {se:.2e}), runtime {elapsed:.1f}s")


def test_criterion_03_compensation_martingale(record):
    pr = builtin_problem("linear_forward", a=0.0, c=0.0, gamma=0.2)
    grid, noise = _setup(pr, 100, 100_000, 3)
    sol = picard_solve(pr, 0.0, noise)
    xt = sol.X[-1]
    se = xt.std(ddof=1) / np.sqrt(xt.size)
    err = abs(xt.mean() - pr.x0)
    assert record(3, err <= 3 * se, f"|mean X_T - x0| = {err:.2e}, 3 SE = {3 * se:.2e}")


def test_criterion_04_backward_oracle(record):
    pr = builtin_problem("linear_bsde", r=0.05, lam=1.0)
    grid, noise = _setup(pr, 200, 100_000, 4)
    sol = picard_solve(pr, 0.0, noise)
    err = abs(sol.Y0 - np.exp(0.05))
    assert record(4, err <= 1e-3, f"|Y0 - e^0.05| = {err:.2e}")


def test_criterion_05_picard_contraction(record):
    pr = builtin_problem("coupled_small", k=0.1)
    grid, noise = _setup(pr, 100, 20_000, 5)
    sol = picard_solve(pr, 0.0, noise, tol=1e-6, max_iter=30)
    later = np.array(sol.picard.ratios[1:])
    ok = (sol.converged and sol.picard.iterations <= 15 and later.size > 0
          and np.all(later < 1) and later.max() <= 2 * later.min())
    assert record(5, ok, f"{sol.picard.iterations} iterations, ratios for k >= 2 in "
                         f"[{later.min():.3f}, {later.max():.3f}]")


@pytest.mark.slow
def test_criterion_06_spike_orders(record):
    pr = builtin_problem("lq_jump", s=2.0)
    grid, noise = _setup(pr, 400, 50_000, 6)
    u = pr.control_path(grid.knots, "oracle")
    base = picard_solve(pr, u, noise)
    cfg = mp.SpikeConfig(0.4, 0.2, 0.0)
    fits, times = {}, {}
    for selector in ("forward_gap", "remainder"):
        start = time.perf_counter()
        fits[selector] = mp.order_experiment(pr, u, cfg, noise, EPS_LIST, selector, 2.0,
                                             baseline=base)
        times[selector] = time.perf_counter() - start
    fwd, rem = fits["forward_gap"], fits["remainder"]
    ok = (not fwd.inconclusive and not rem.inconclusive and 0.85 <= fwd.slope <= 1.15
          and 1.7 <= rem.slope <= 2.3 and max(times.values()) < 600)
    assert record(6, ok, f"forward slope {fwd.slope:.3f}, remainder slope {rem.slope:.3f}, "
                         f"sweeps {times['forward_gap']:.0f}s / {times['remainder']:.0f}s")


@pytest.mark.slow
def test_criterion_07_first_variation_identities(record):
    pr = builtin_problem("lq_jump", s=1.0, fx=0.2, fy=0.2)
    metrics = {}
    for K in (200, 400):
        grid, noise = _setup(pr, K, 20_000, 7)
        u = pr.control_path(grid.knots, "oracle", shift=1.0)
        sol = picard_solve(pr, u, noise)
        fo = solve_first_order_adjoint(pr, sol, noise)
        idc = mp.first_variation_identity(pr, sol, fo, mp.SpikeConfig(0.4, 0.1, 0.0), noise)
        metrics[K] = (idc.mean_abs_Y, idc.mean_abs_Zt)
    ry = metrics[200][0] / metrics[400][0]
    rz = metrics[200][1] / metrics[400][1]
    ok = 1.5 <= ry <= 2.5 and 1.5 <= rz <= 2.5
    assert record(7, ok, f"shrink factors: Y {ry:.3f}, Zt {rz:.3f}")


def test_criterion_08_k_algebra(record):
    rng = np.random.default_rng(8)
    n = 10_000
    p, q, qt = rng.uniform(-2, 2, (3, n))
    sx, sy, sz, szt, fx, fy, fzt = rng.uniform(-0.4, 0.4, (7, n))
    K1, K2 = k_algebra(p, q, qt, sx, sy, sz, szt, fx, fy, fzt)
    r1, r2 = k_algebra_residual(K1, K2, p, q, qt, sx, sy, sz, szt, fx, fy, fzt)
    worst = float(max(r1.max(), r2.max()))
    # guard: sweep |1 - sigma_z p| across the threshold
    offsets = np.concatenate([np.linspace(1e-10, 2e-8, 400), -np.linspace(1e-10, 2e-8, 400)])
    mismatches = 0
    for d in offsets:
        sz1 = 1.0 - d
        den = abs(1.0 - sz1 * 1.0)
        try:
            k_algebra(1.0, 0.1, 0.0, 0.1, 0.0, sz1, 0.0, 0.0, 0.0, 0.0)
            raised = False
        except KAlgebraSingularity:
            raised = True
        mismatches += raised != (den <= EPS_DEN)
    ok = worst <= 1e-12 and mismatches == 0
    assert record(8, ok, f"max residual {worst:.2e}, guard mismatches {mismatches}/{offsets.size}")


def test_criterion_09_maximum_principle(record):
    pr = builtin_problem("lq_jump", s=1.0, fx=0.2, fy=0.2)
    grid, noise = _setup(pr, 100, 2000, 9)
    offsets = np.linspace(-2, 2, 41)
    reports = {}
    for shift in (0.0, 1.0):
        u = pr.control_path(grid.knots, "oracle", shift=shift)
        sol = picard_solve(pr, u, noise)
        fo = solve_first_order_adjoint(pr, sol, noise)
        so = solve_second_order_adjoint(pr, sol, fo, noise)
        reports[shift] = mp.verify_mp(pr, sol, fo, so, noise, offsets=offsets, n_times=20,
                                      n_paths=200, tol=1e-2)
    good, bad = reports[0.0], reports[1.0]
    ok = (good.violation_fraction == 0 and good.n_points == 20 * 200 * 41
          and bad.violation_fraction > 0)
    assert record(9, ok, f"optimal: min gap {good.min_gap:.2e}, violations "
                         f"{good.violation_fraction}; shifted: violations "
                         f"{bad.violation_fraction:.3f}")


@pytest.mark.slow
def test_criterion_10_expansion(record):
    pr = builtin_problem("lq_jump", c=3.0)
    grid, noise = _setup(pr, 400, 20_000, 10)
    u = pr.control_path(grid.knots, "oracle", shift=1.0)
    t_bar = 0.4
    cfg = mp.SpikeConfig(t_bar, 0.2, float(pr.oracle.control(t_bar)))
    rep = mp.expansion_check(pr, u, cfg, noise, EPS_LIST)
    assert record(10, rep.passed, f"G {rep.G:.4f}, residuals "
                                  + ", ".join(f"{r:.4f}" for r in rep.residuals)
                                  + f", threshold {rep.threshold:.4f}, sign match {rep.sign_match}")


@pytest.mark.slow
def test_criterion_11_second_variation_identity(record):
    pr = builtin_problem("lq_jump", c=1.0)
    grid, noise = _setup(pr, 800, 10_000, 11)
    u = pr.control_path(grid.knots, "oracle", shift=1.0)
    sol = picard_solve(pr, u, noise)
    fo = solve_first_order_adjoint(pr, sol, noise)
    so = solve_second_order_adjoint(pr, sol, fo, noise)
    cfg = mp.SpikeConfig(0.0, 0.1, float(pr.oracle.control(0.0)))
    var = mp.first_variation_simulate(pr, sol, fo, cfg, noise)
    sv = mp.second_variation_simulate(pr, sol, fo, so, var, noise)
    gap, se = sv.identity_gap()
    tol = max(3 * se, 5e-3 * abs(sv.ystar.Y0))
    assert record(11, abs(gap) <= tol, f"Y2_0 {sv.Y2_0:.5f}, Y*_0 {sv.ystar.Y0:.5f}, "
                                       f"|gap| {abs(gap):.2e} <= {tol:.2e}")


def test_criterion_12_determinism(record, tmp_path):
    outs = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        code = main(["solve", "--problem", "coupled_small", "--paths", "5000", "--steps", "50",
                     "--seed", "12", "--threads", str(threads), "--out", str(out)])
        assert code == 0
        outs.append((out / "solution.csv").read_bytes())
    assert record(12, outs[0] == outs[1], f"CSV bytes identical across thread counts "
                                          f"({len(outs[0])} bytes)")
