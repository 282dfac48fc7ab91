import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpfbsde.adjoint import (EPS_DEN, KAlgebraSingularity, k_algebra, k_algebra_residual,
                               solve_first_order_adjoint, solve_second_order_adjoint)
from jumpfbsde.fbsolve import picard_solve
from jumpfbsde.model import builtin_problem
from jumpfbsde.noise import TimeGrid, generate_noise

small = st.floats(-0.4, 0.4)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), small, small, small, small, small,
       small, small)
def test_k_algebra_round_trip(p, q, qt, sx, sy, sz, szt, fx, fy, fzt):
    K1, K2 = k_algebra(p, q, qt, sx, sy, sz, szt, fx, fy, fzt)
    r1, r2 = k_algebra_residual(K1, K2, p, q, qt, sx, sy, sz, szt, fx, fy, fzt)
    assert r1 <= 1e-12 and r2 <= 1e-12


def test_guard_threshold():
    args = dict(q=0.1, qt=0.0, sx=0.1, sy=0.0, szt=0.0, fx=0.0, fy=0.0, fzt=0.0)
    with pytest.raises(KAlgebraSingularity) as info:
        k_algebra(p=1.0, sz=1.0 - 0.5 * EPS_DEN, **args)
    assert info.value.guard == "sigma_z*p"
    k_algebra(p=1.0, sz=1.0 - 2 * EPS_DEN, **args)


@pytest.fixture(scope="module")
def lq():
    pr = builtin_problem("lq_jump", fx=0.2, fy=0.2)
    grid = TimeGrid(pr.T, 50)
    noise = generate_noise(grid, pr.markspace, 3000, 4)
    sol = picard_solve(pr, pr.control_path(grid.knots, "oracle"), noise)
    fo = solve_first_order_adjoint(pr, sol, noise)
    return pr, grid, noise, sol, fo


def test_lq_adjoint_matches_oracle(lq):
    pr, grid, noise, sol, fo = lq
    np.testing.assert_allclose(fo.p, np.broadcast_to(pr.oracle.p(grid.knots)[:, None], fo.p.shape),
                               atol=1e-8)
    assert fo.bounded
    # K2 = fx p + fy p^2 with deterministic p
    np.testing.assert_allclose(fo.K2[..., 0], 0.2 * fo.p[:-1] + 0.2 * fo.p[:-1] ** 2, atol=1e-8)


def test_second_order_adjoint_vanishes_for_affine_lq(lq):
    pr, grid, noise, sol, fo = lq
    so = solve_second_order_adjoint(pr, sol, fo, noise)
    assert np.max(np.abs(so.P)) < 1e-10


def test_zero_partials_give_terminal_slope():
    pr = builtin_problem("linear_forward", a=0.0, c=0.0, gamma=0.0)
    grid = TimeGrid(pr.T, 20)
    noise = generate_noise(grid, pr.markspace, 500, 0)
    sol = picard_solve(pr, 0.0, noise)
    fo = solve_first_order_adjoint(pr, sol, noise)
    np.testing.assert_allclose(fo.p, 1.0, atol=1e-12)
