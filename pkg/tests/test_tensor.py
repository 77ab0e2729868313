import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reslora.tensor import (
    SeededRng,
    ShapeError,
    as_matrix,
    column_norms,
    frobenius_norm,
    frozen,
    gaussian_fill,
    identity,
    matmul,
    max_abs_diff,
    zeros,
)


def test_matmul_identity():
    m = as_matrix([[1.5, -2.0, 3.0], [0.25, 4.0, -1.0]])
    np.testing.assert_array_equal(matmul(identity(2), m), m)


def test_matmul_hand_example():
    out = matmul(as_matrix([[1, 2], [3, 4]]), as_matrix([[1], [1]]))
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_zero():
    m = SeededRng(3).normal(4, 5)
    assert not matmul(m, zeros(5, 2)).any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match="2x3 by 2x3"):
        matmul(zeros(2, 3), zeros(2, 3))


@pytest.mark.parametrize("m, expected", [([[3, 4]], 5.0), ([[0, 0], [0, 0]], 0.0), ([[1, 2], [2, 0]], 3.0)])
def test_frobenius_examples(m, expected):
    assert frobenius_norm(as_matrix(m)) == expected


@pytest.mark.parametrize("a, b, expected", [([[1]], [[3]], 2.0), ([[1, 0]], [[0, 2]], 2.0)])
def test_max_abs_diff_examples(a, b, expected):
    assert max_abs_diff(as_matrix(a), as_matrix(b)) == expected


def test_max_abs_diff_self_and_shape():
    m = SeededRng(1).normal(3, 3)
    assert max_abs_diff(m, m) == 0.0
    with pytest.raises(ShapeError):
        max_abs_diff(m, zeros(3, 2))


def test_gaussian_fill_statistics():
    x = gaussian_fill(SeededRng(11), 1, 100_000, 1.0)
    assert abs(x.mean()) < 0.01
    assert abs(x.std() - 1.0) < 0.01
    y = gaussian_fill(SeededRng(11), 1, 100_000, 3.0)
    assert abs(y.mean()) < 0.01 * 3.0


def test_gaussian_fill_deterministic_bytes():
    a = gaussian_fill(SeededRng(42), 7, 5, 0.3)
    b = gaussian_fill(SeededRng(42), 7, 5, 0.3)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != gaussian_fill(SeededRng(43), 7, 5, 0.3).tobytes()


def test_streams_are_independent():
    a = SeededRng(5, stream=0).normal(3, 3)
    b = SeededRng(5, stream=1).normal(3, 3)
    assert not np.array_equal(a, b)


def test_gaussian_fill_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        gaussian_fill(SeededRng(0), 2, 2, 0.0)


def test_as_matrix_and_frozen():
    assert as_matrix(2.0).shape == (1, 1)
    assert as_matrix([1, 2, 3]).shape == (1, 3)
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        as_matrix([[]])
    f = frozen(identity(2))
    with pytest.raises(ValueError):
        f[0, 0] = 5.0


def test_column_norms():
    np.testing.assert_allclose(column_norms(as_matrix([[3, 0], [4, 2]])), [5.0, 2.0])


dims = st.integers(1, 6)
seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(seeds, dims, dims, dims, dims)
def test_matmul_associative(seed, p, q, r, s):
    rng = SeededRng(seed)
    a, b, c = rng.normal(p, q), rng.normal(q, r), rng.normal(r, s)
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    scale = max(1.0, float(np.max(np.abs(left))))
    assert max_abs_diff(left, right) <= 1e-9 * scale


@settings(max_examples=60, deadline=None)
@given(seeds, dims, dims, st.floats(-1e3, 1e3, allow_nan=False))
def test_frobenius_homogeneous(seed, p, q, c):
    a = SeededRng(seed).normal(p, q)
    lhs, rhs = frobenius_norm(c * a), abs(c) * frobenius_norm(a)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, rhs)


@settings(max_examples=40, deadline=None)
@given(seeds, dims, dims, dims)
def test_matmul_distributes(seed, p, q, r):
    rng = SeededRng(seed)
    a, b, c = rng.normal(p, q), rng.normal(q, r), rng.normal(q, r)
    np.testing.assert_allclose(matmul(a, b + c), matmul(a, b) + matmul(a, c), atol=1e-12)
