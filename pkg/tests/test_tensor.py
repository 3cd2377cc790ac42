import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnsteer.tensor import OpCounter, ShapeError, matmul, rms_norm, row_softmax

from oracles import naive_matmul, rms_norm_row, softmax_matrix


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_analytic():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert out.tolist() == [[2.0], [4.0]]


def test_matmul_against_triple_loop(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    expected = np.array(naive_matmul(a.tolist(), b.tolist()))
    assert np.max(np.abs(matmul(a, b) - expected)) < 1e-12


def test_matmul_counts_fmas():
    c = OpCounter()
    matmul(np.ones((3, 4)), np.ones((4, 5)), c)
    matmul(np.ones((2, 2)), np.ones((2, 1)), c)
    assert c.fused_multiply_adds == 3 * 4 * 5 + 2 * 2 * 1


def test_matmul_mismatch_reports_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity(rng):
    a, b, c = (rng.normal(size=(8, 8)) for _ in range(3))
    assert np.max(np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c)))) < 1e-9


def test_softmax_uniform_row():
    out = row_softmax(np.zeros((1, 3)))
    assert np.allclose(out, 1 / 3, atol=1e-15)


def test_softmax_causal_first_row(rng):
    out = row_softmax(rng.normal(size=(3, 3)), causal_mask=True)
    assert out[0].tolist() == [1.0, 0.0, 0.0]
    assert out[1, 2] == 0.0


def test_softmax_against_direct_formula(rng):
    a = rng.normal(size=(6, 6)) * 3
    for causal in (False, True):
        expected = np.array(softmax_matrix(a.tolist(), causal=causal))
        assert np.max(np.abs(row_softmax(a, causal_mask=causal) - expected)) < 1e-12


def test_softmax_row_offset_matches_square_tail(rng):
    a = rng.normal(size=(5, 5))
    full = row_softmax(a, causal_mask=True)
    tail = row_softmax(a[3:], causal_mask=True, row_offset=3)
    assert np.max(np.abs(full[3:] - tail)) < 1e-15


def test_softmax_rejects_fully_masked_row():
    a = np.array([[0.0, 1.0], [-np.inf, -np.inf]])
    with pytest.raises(ValueError, match="masked"):
        row_softmax(a)


def test_softmax_causal_requires_square():
    with pytest.raises(ShapeError):
        row_softmax(np.zeros((2, 3)), causal_mask=True)


def test_softmax_stable_for_large_inputs():
    out = row_softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    assert np.allclose(out, [[0.5, 0.5, 0.0]])


def test_softmax_counts_rows():
    c = OpCounter()
    row_softmax(np.zeros((4, 4)), causal_mask=True, counter=c)
    assert c.softmax_rows == 4


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(a, shift):
    out = row_softmax(a)
    assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-12)
    assert np.max(np.abs(row_softmax(a + shift) - out)) < 1e-12


def test_rms_norm_ones():
    out = rms_norm(np.ones((1, 4)), np.ones(4), 0.0)
    assert out.tolist() == [[1.0, 1.0, 1.0, 1.0]]


def test_rms_norm_zero_row():
    assert np.array_equal(rms_norm(np.zeros((2, 3)), np.ones(3), 1e-5), np.zeros((2, 3)))
    assert np.array_equal(rms_norm(np.zeros((1, 3)), np.ones(3), 0.0), np.zeros((1, 3)))


def test_rms_norm_against_scalar_loop(rng):
    x, g = rng.normal(size=(4, 9)), rng.normal(size=9)
    expected = np.array([rms_norm_row(r, g.tolist(), 1e-5) for r in x.tolist()])
    assert np.max(np.abs(rms_norm(x, g, 1e-5) - expected)) < 1e-12


def test_rms_norm_gain_length_checked():
    with pytest.raises(ShapeError):
        rms_norm(np.ones((2, 3)), np.ones(2))
