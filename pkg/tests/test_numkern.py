import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vql.errors import ParameterError, ShapeError
from vql.numkern import as_matrix, clip_row_norms, log_softmax, matmul, row_norms, row_softmax

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    assert np.array_equal(matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]), [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert np.array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])


def test_matmul_matches_triple_loop(rng):
    # small integers keep every partial sum exact, so the comparison can be bitwise
    a = rng.integers(-9, 10, size=(5, 7)).astype(float)
    b = rng.integers(-9, 10, size=(7, 3)).astype(float)
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_matmul_random_floats_close_to_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ParameterError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])


@pytest.mark.parametrize(
    "x, want",
    [([[0.0, 0.0]], [[0.5, 0.5]]), ([[1000.0, 1000.0]], [[0.5, 0.5]]), ([[0.0, np.log(3.0)]], [[0.25, 0.75]])],
)
def test_softmax_examples(x, want):
    np.testing.assert_allclose(row_softmax(x), want, rtol=0, atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = row_softmax(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=finite),
    st.floats(-1e3, 1e3),
)
def test_softmax_shift_invariance(x, s):
    np.testing.assert_allclose(row_softmax(x + s), row_softmax(x), rtol=0, atol=1e-12)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(4, 9)) * 5
    np.testing.assert_allclose(log_softmax(x), np.log(row_softmax(x)), atol=1e-12)


def test_clip_examples():
    assert np.array_equal(clip_row_norms([[3.0, 4.0]], 10.0), [[3.0, 4.0]])
    np.testing.assert_allclose(clip_row_norms([[3.0, 4.0]], 1.0), [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_clip_random_matrix(rng):
    v = rng.normal(size=(20, 8)) * 3
    assert np.all(row_norms(clip_row_norms(v, 2.0)) <= 2.0 + 1e-12)


def test_clip_rejects_nonpositive_bound():
    for c in (0.0, -1.0):
        with pytest.raises(ParameterError):
            clip_row_norms([[1.0]], c)


def test_clip_vector_input():
    np.testing.assert_allclose(clip_row_norms(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])


@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)),
    st.floats(1e-3, 1e3),
)
def test_clip_bounded_and_idempotent(v, c):
    once = clip_row_norms(v, c)
    assert np.all(row_norms(once) <= c)
    assert np.array_equal(clip_row_norms(once, c), once)
    inside = row_norms(v) <= c
    assert np.array_equal(once[inside], v[inside])
