import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpfbsde.markspace import (MarkSpace, MarkSpaceError, MarkVector, inner, integrate,
                                 kahan_sum, l2_norm)


def test_basic_properties():
    ms = MarkSpace((0.5, 1.0), (0.6, 0.4))
    assert ms.size == 2
    assert ms.total_mass == pytest.approx(1.0)
    np.testing.assert_allclose(ms.probabilities, [0.6, 0.4])


@pytest.mark.parametrize("marks, weights", [
    ((), ()),
    ((1.0, 2.0), (1.0,)),
    ((1.0,), (-1.0,)),
    ((1.0, 1.0), (0.5, 0.5)),
    ((1.0,), (np.nan,)),
])
def test_rejects_bad_inputs(marks, weights):
    with pytest.raises(MarkSpaceError):
        MarkSpace(marks, weights)


def test_integrate_and_norm():
    ms = MarkSpace((0.5, 1.0, 2.0), (0.2, 0.3, 0.5))
    v = np.array([1.0, 2.0, 3.0])
    assert integrate(ms, v) == pytest.approx(0.2 + 0.6 + 1.5)
    assert l2_norm(ms, v) == pytest.approx(np.sqrt(0.2 + 1.2 + 4.5))
    batch = np.tile(v, (4, 1))
    np.testing.assert_allclose(integrate(ms, batch), integrate(ms, v))
    assert inner(ms, v, v) == pytest.approx(l2_norm(ms, v) ** 2)


def test_mark_vector_algebra():
    ms = MarkSpace((1.0, 2.0), (1.0, 1.0))
    a = MarkVector(ms, np.array([1.0, 2.0]))
    b = MarkVector(ms, np.array([3.0, 4.0]))
    np.testing.assert_allclose((a + b).values, [4.0, 6.0])
    np.testing.assert_allclose((2.0 * a).values, [2.0, 4.0])
    with pytest.raises(MarkSpaceError):
        integrate(MarkSpace((1.0,), (1.0,)), a)


def test_kahan_sum_cancellation():
    vals = np.array([1e16, 1.0, -1e16, 1.0])
    assert kahan_sum(vals) == pytest.approx(2.0)


weights = st.lists(st.floats(0.01, 10.0), min_size=1, max_size=6)


@settings(max_examples=50, deadline=None)
@given(weights, st.floats(-5, 5), st.floats(-5, 5))
def test_integral_is_linear(w, a, b):
    ms = MarkSpace(tuple(float(i) for i in range(len(w))), tuple(w))
    rng = np.random.default_rng(len(w))
    v, u = rng.normal(size=len(w)), rng.normal(size=len(w))
    lhs = integrate(ms, a * v + b * u)
    rhs = a * integrate(ms, v) + b * integrate(ms, u)
    assert lhs == pytest.approx(rhs, abs=1e-10)
    assert l2_norm(ms, v) >= 0
