import numpy as np
import pytest

from jumpfbsde.model import (Coefficient, Coefficients, ControlSet, Problem, ProblemError,
                             affine, builtin_problem, list_problems, quadratic_terminal,
                             validate_problem)
from jumpfbsde.markspace import MarkSpace


@pytest.mark.parametrize("name", list_problems())
def test_builtins_validate(name):
    rep = validate_problem(builtin_problem(name))
    assert rep.passed, rep.failures


def test_unknown_builtin_lists_registry():
    with pytest.raises(KeyError, match="lq_jump"):
        builtin_problem("nope")


def test_wrong_gradient_is_caught():
    good = affine(x=0.5)
    bad = Coefficient(good.value, lambda *a: (0.4, 0.0, 0.0, 0.0))
    zero = affine()
    coefs = Coefficients(bad, zero, zero, zero, quadratic_terminal(1.0))
    pr = Problem("bad", 1.0, 1.0, coefs, MarkSpace((1.0,), (1.0,)), ControlSet.box(-1, 1))
    rep = validate_problem(pr)
    assert not rep.passed
    assert any("b" in f for f in rep.failures)


def test_f_may_not_depend_on_z():
    zero = affine()
    with pytest.raises(ProblemError):
        Coefficients(zero, zero, zero, zero, quadratic_terminal(), f_ignores_z=False)


def test_lq_oracle_is_stationary():
    # dH/du = u + p at the oracle control vanishes away from the box bounds
    pr = builtin_problem("lq_jump", c=0.7, beta=1.3, lam=2.0)
    t = np.linspace(0, 1, 11)
    u = pr.oracle.control(t)
    p = pr.oracle.p(t)
    e = pr.markspace.e
    h = 1e-6
    coefs = pr.coefficients

    def H(v):
        return coefs.g(t, 1.0, 0.0, 0.0, 0.0, v, e) + p * coefs.b(t, 1.0, 0.0, 0.0, 0.0, v, e)

    np.testing.assert_allclose((H(u + h) - H(u - h)) / (2 * h), 0.0, atol=1e-7)
    np.testing.assert_allclose(p, 1.3 + 0.7 * 2.0 * (1 - t))


def test_control_sets():
    box = ControlSet.box(-1, 2)
    assert box.contains(np.array([-1.0, 2.0, 2.5])).tolist() == [True, True, False]
    np.testing.assert_allclose(box.project(np.array([-3.0, 0.5, 4.0])), [-1.0, 0.5, 2.0])
    fin = ControlSet.finite([0.0, 1.0])
    assert fin.contains(np.array([0.0, 0.5])).tolist() == [True, False]
    with pytest.raises(ProblemError):
        ControlSet.box(1, -1)


def test_control_path_kinds():
    pr = builtin_problem("lq_jump")
    knots = np.linspace(0, 1, 5)
    np.testing.assert_allclose(pr.control_path(knots, "oracle")[:, 0], -(1 + (1 - knots[:-1])))
    np.testing.assert_allclose(pr.control_path(knots, 0.25, shift=1.0), 1.25)
