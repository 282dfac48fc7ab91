import numpy as np
import pytest

from jumpfbsde import maxprinciple as mp
from jumpfbsde.adjoint import solve_first_order_adjoint, solve_second_order_adjoint
from jumpfbsde.fbsolve import picard_solve
from jumpfbsde.model import affine, builtin_problem
from jumpfbsde.noise import TimeGrid, generate_noise


@pytest.fixture(scope="module")
def lq_solved(lq_small):
    pr, grid, noise = lq_small
    u = pr.control_path(grid.knots, "oracle", shift=1.0)
    sol = picard_solve(pr, u, noise)
    fo = solve_first_order_adjoint(pr, sol, noise)
    so = solve_second_order_adjoint(pr, sol, fo, noise)
    return pr, grid, noise, sol, fo, so


def test_spike_mask_excludes_jump_steps(lq_small):
    pr, grid, noise = lq_small
    cfg = mp.SpikeConfig(0.4, 0.2, 0.0)
    mask = mp.spike_mask(cfg, noise)
    win = mp.window_steps(grid, cfg)
    assert win.sum() == 10
    assert not mask[~win].any()
    jumped = noise.any_jump()
    assert np.array_equal(mask[win], ~jumped[win])


def test_spike_config_checks():
    with pytest.raises(ValueError):
        mp.SpikeConfig(0.9, 0.2).check(1.0)
    with pytest.raises(ValueError):
        mp.SpikeConfig(-0.1, 0.1).check(1.0)


def test_zero_epsilon_gap_is_exact(lq_solved):
    pr, grid, noise, sol, *_ = lq_solved
    gap, se, _ = mp.spike_cost_gap(pr, sol.control, mp.SpikeConfig(0.4, 0.0, 3.0), noise,
                                   baseline=sol)
    assert gap == 0.0 and se == 0.0


def test_state_dependent_replacement(lq_small):
    pr, grid, noise = lq_small
    X = np.tile(np.linspace(0, 1, noise.n_paths), (grid.n_steps + 1, 1))
    cfg = mp.SpikeConfig(0.2, 0.1, lambda x: 2 * x)
    u = mp.build_spike_control(0.0, cfg, noise, X)
    mask = mp.spike_mask(cfg, noise)
    k = np.flatnonzero(mask.any(axis=1))[0]
    np.testing.assert_allclose(u[k][mask[k]], 2 * X[k][mask[k]])


def test_delta_fixed_point_closed_form():
    # sigma = a z + b u  ->  D = p b (u - ubar) / (1 - p a)
    sig = affine(z=0.3, control=lambda u, e: 0.5 * u)
    d = mp.delta_fixed_point(sig, 0.0, 0.0, 0.0, 0.2, 0.0, 1.5, 0.5, 1.0, 2.0)
    assert d == pytest.approx(2.0 * 0.5 * 1.0 / (1 - 0.6), rel=1e-10)
    with pytest.raises(mp.FixedPointError):
        mp.delta_fixed_point(affine(z=1.0, control=lambda u, e: u), 0.0, 0, 0, 0, 0, 1.0, 0.0,
                             1.0, 1.0)


def test_hamiltonian_identity_coupled():
    pr = builtin_problem("coupled_small")
    rng = np.random.default_rng(0)
    n = 200
    args = [0.3] + [rng.normal(size=(n, 1)) for _ in range(2)] + \
        [rng.normal(size=(n, 2)) for _ in range(2)]
    u = rng.uniform(-1, 1, (n, 1))
    ubar = rng.uniform(-1, 1, (n, 1))
    res = mp.hamiltonian_identity_residual(pr.coefficients, *args, u, ubar, pr.markspace.e,
                                           rng.normal(size=(n, 1)), rng.normal(size=(n, 2)),
                                           rng.normal(size=(n, 1)))
    assert np.max(res) < 1e-12


def test_verify_mp_flags_shifted_control(lq_solved):
    pr, grid, noise, sol, fo, so = lq_solved
    rep = mp.verify_mp(pr, sol, fo, so, noise, offsets=np.linspace(-2, 2, 41), n_times=5,
                       n_paths=20)
    assert rep.violation_fraction > 0
    assert rep.min_gap == pytest.approx(-0.5, abs=1e-9)


def test_first_variation_adjoint_form(lq_solved):
    pr, grid, noise, sol, fo, so = lq_solved
    var = mp.first_variation_simulate(pr, sol, fo, mp.SpikeConfig(0.4, 0.1, 0.0), noise)
    np.testing.assert_allclose(var.Y1, fo.p * var.X1)
    assert np.all(var.X1[:20] == 0)
    assert np.abs(var.X1[-1]).mean() > 0
    idc = mp.first_variation_identity(pr, sol, fo, mp.SpikeConfig(0.4, 0.1, 0.0), noise)
    assert idc.mean_abs_Y < 0.05 * np.abs(idc.X1).mean() * np.abs(fo.p).mean()


def test_second_variation_and_gamma(lq_solved):
    pr, grid, noise, sol, fo, so = lq_solved
    var = mp.first_variation_simulate(pr, sol, fo, mp.SpikeConfig(0.0, 0.1, -2.0), noise)
    sv = mp.second_variation_simulate(pr, sol, fo, so, var, noise)
    gap, se = sv.identity_gap()
    assert abs(gap) <= max(3 * se, 0.02 * abs(sv.ystar.Y0))
    gam = mp.gamma_simulate(pr, sol, fo, noise)
    assert gam.nonpositive_fraction == 0.0
    y_gamma, _ = mp.ystar_via_gamma(gam.gamma, var, so, noise)
    assert y_gamma == pytest.approx(sv.ystar.Y0, rel=1e-6)


def test_fit_order_slope_and_inconclusive():
    eps = [0.2, 0.1, 0.05, 0.025]
    fit = mp.fit_order(eps, [e ** 1.0 for e in eps], [1e-6] * 4, "forward_gap", 2.0)
    assert fit.slope == pytest.approx(1.0) and fit.expected_slope == 1.0
    zero = mp.fit_order(eps, [0.0] * 4, [0.0] * 4, "forward_gap", 2.0)
    assert zero.inconclusive and zero.slope is None
    assert mp.fit_order(eps, [1.0] * 4, [1e-3] * 4, "remainder", 2.0).expected_slope == 2.0


def test_epsilon_list_checks(lq_small):
    pr, grid, noise = lq_small
    with pytest.raises(ValueError):
        mp.order_experiment(pr, 0.0, mp.SpikeConfig(0.4, 0.1), noise, [0.2, 0.1, 0.05])
    with pytest.raises(ValueError):
        mp.order_experiment(pr, 0.0, mp.SpikeConfig(0.4, 0.1), noise, [0.2, 0.1, 0.04, 0.02])
    with pytest.raises(ValueError, match="multiple of dt"):
        mp.order_experiment(pr, 0.0, mp.SpikeConfig(0.4, 0.1), noise,
                            [0.2, 0.1, 0.05, 0.025, 0.0125])


def test_order_on_zero_problem_is_inconclusive():
    pr = builtin_problem("zero")
    grid = TimeGrid(1.0, 80)
    noise = generate_noise(grid, pr.markspace, 500, 0)
    fit = mp.order_experiment(pr, 0.0, mp.SpikeConfig(0.4, 0.1, 1.0), noise,
                              [0.2, 0.1, 0.05, 0.025])
    assert fit.inconclusive
