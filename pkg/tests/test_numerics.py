import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dkit.errors import NonFiniteValue, NonPositiveTemperature, ShapeMismatch, ZeroNorm
from dkit.numerics import as_matrix, cosine_similarity, grad_check, l2_normalize, log_softmax, softmax

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 8), elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(l2_normalize([1, 0, 0]), [1, 0, 0])
    with pytest.raises(ZeroNorm):
        l2_normalize([0, 0])


@given(vectors)
def test_l2_normalize_unit_and_idempotent(v):
    u = l2_normalize(v)
    assert abs(np.linalg.norm(u) - 1) < 1e-12
    np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)


def test_cosine_examples():
    assert cosine_similarity([1, 0], [0, 1]) == 0
    assert cosine_similarity([1, 1], [2, 2]) == pytest.approx(1, abs=1e-15)
    assert cosine_similarity([1, 0], [-1, 0]) == -1
    with pytest.raises(ShapeMismatch):
        cosine_similarity([1, 0], [1, 0, 0])


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-10, 10)), arrays(np.float64, n, elements=st.floats(-10, 10)))),
    st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariant(pair, alpha, beta):
    a, b = pair
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = cosine_similarity(a, b)
    assert -1 <= c <= 1
    assert abs(cosine_similarity(alpha * a, beta * b) - c) < 1e-12


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0], 1), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(softmax([1, 0], 0.5), [0.880797, 0.119203], atol=1e-6)
    e2 = math.exp(2)
    assert softmax([1, 0], 0.5)[0] == pytest.approx(e2 / (e2 + 1), abs=1e-15)
    np.testing.assert_allclose(softmax([1000, 999], 1), [0.731059, 0.268941], atol=1e-6)
    with pytest.raises(NonPositiveTemperature):
        softmax([1, 2], 0)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3), st.floats(0.05, 10))
def test_softmax_shift_invariant(logits, c, tau):
    p = softmax(logits, tau)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p >= 0)
    np.testing.assert_allclose(softmax(logits + c, tau), p, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(logits, tau)), p, atol=1e-12)


def test_grad_check_quadratic():
    report = grad_check(lambda x: (float(x[0] ** 2), 2 * x), [3.0], 1e-5)
    assert report.max_rel_error < 1e-6
    assert report.analytic == 6.0


def test_grad_check_flags_wrong_gradient():
    report = grad_check(lambda x: (float(np.sum(x**3)), 2 * x), np.array([1.0, 2.0]))
    assert report.max_rel_error > 0.1
    assert report.worst_coordinate == 1


def test_grad_check_errors():
    with pytest.raises(NonFiniteValue):
        grad_check(lambda x: (float("nan"), x), [1.0])
    with pytest.raises(ValueError):
        grad_check(lambda x: (0.0, x), [1.0], step=0)


def test_as_matrix_contract():
    assert as_matrix([1, 2, 3]).shape == (1, 3)
    assert as_matrix([[1, 2], [3, 4]]).flags["C_CONTIGUOUS"]
    with pytest.raises(ShapeMismatch):
        as_matrix([[1, 2]], rows=2)
    with pytest.raises(NonFiniteValue):
        as_matrix([[np.inf]])


@settings(deadline=None)
@given(st.integers(0, 10**6))
def test_grad_check_zero_gradient_floor(seed):
    x = np.random.default_rng(seed).normal(size=3)
    assert grad_check(lambda v: (1.0, np.zeros_like(v)), x).max_rel_error == 0.0
