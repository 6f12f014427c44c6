import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from feddap_sim.numerics import cosine, cosine_matrix, matvec, softmax_temp, vec_add, vec_mean, vec_scale

from conftest import py_cosine

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_cosine_self_and_orthogonal():
    assert cosine([3.0, -1.0, 2.0], [3.0, -1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0


def test_cosine_against_scalar_oracle():
    expected = 32.0 / (math.sqrt(14.0) * math.sqrt(77.0))
    assert abs(cosine([1, 2, 3], [4, 5, 6]) - expected) < 1e-12
    assert abs(py_cosine([1, 2, 3], [4, 5, 6]) - expected) < 1e-12


def test_cosine_zero_norm_and_mismatch():
    assert cosine([0.0, 0.0], [1.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        cosine([1.0, 2.0], [1.0, 2.0, 3.0])


def test_cosine_matrix_matches_pairwise(rs):
    A = rs.standard_normal((4, 5))
    B = rs.standard_normal((3, 5))
    B[1] = 0.0
    M = cosine_matrix(A, B)
    for i in range(4):
        for j in range(3):
            assert abs(M[i, j] - py_cosine(A[i], B[j])) < 1e-12


@settings(max_examples=200)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite),
       st.floats(1e-3, 1e3))
def test_cosine_symmetric_and_scale_invariant(a, b, k):
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine(b, a)
    if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
        assert abs(cosine(k * a, b) - c) < 1e-12


def test_softmax_simple_cases():
    assert softmax_temp([7.3], 0.2).tolist() == [1.0]
    np.testing.assert_array_equal(softmax_temp([-4.0, -4.0], 3.0), [0.5, 0.5])
    e = [math.exp(s / 0.5) for s in (1, 2, 3)]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(softmax_temp([1, 2, 3], 0.5), expected, atol=1e-9, rtol=0)


def test_softmax_rejects_bad_input():
    with pytest.raises(ValueError):
        softmax_temp([], 1.0)
    with pytest.raises(ValueError):
        softmax_temp([1.0], 0.0)
    with pytest.raises(ValueError):
        softmax_temp([1.0], -1.0)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(1e-3, 1e3), finite)
def test_softmax_normalized_and_shift_invariant(scores, tau, shift):
    p = softmax_temp(scores, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(softmax_temp(scores + shift, tau), p, atol=1e-9, rtol=0)


def test_softmax_large_scores_stay_finite():
    p = softmax_temp([1000.0, 999.0], 1e-3)
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


def test_vector_plumbing(rs):
    v = rs.standard_normal(4)
    np.testing.assert_array_equal(vec_mean([v]), v)
    np.testing.assert_array_equal(vec_mean([v, -v]), np.zeros(4))
    np.testing.assert_array_equal(matvec(np.eye(4), v), v)
    np.testing.assert_array_equal(vec_add(v, v), vec_scale(v, 2.0))
    with pytest.raises(ValueError):
        vec_mean([])
    with pytest.raises(ValueError):
        matvec(np.eye(3), v)
