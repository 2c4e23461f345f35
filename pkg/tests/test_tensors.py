import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparse_s5.tensors import DimensionError, Mask, SparseMatrix, dense_matvec, mask_apply, spmv_event_driven, to_csr


def brute_macs(W, x):
    return sum(int(np.count_nonzero(W[:, j])) for j in range(W.shape[1]) if x[j] != 0)


def test_mask_apply_by_hand():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    M = Mask.from_bool(np.array([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(mask_apply(W, M), [[1.0, 0.0], [0.0, 4.0]])


def test_mask_identity_and_annihilator(rng):
    W = rng.standard_normal((5, 7))
    np.testing.assert_array_equal(mask_apply(W, Mask.ones(5, 7)), W)
    assert not mask_apply(W, Mask.from_bool(np.zeros((5, 7)))).any()


def test_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        mask_apply(np.zeros((2, 3)), Mask.ones(3, 2))


def test_mask_packing_roundtrip(rng):
    keep = rng.random((9, 11)) < 0.3
    m = Mask.from_bool(keep)
    assert m.bits.size == (99 + 7) // 8
    np.testing.assert_array_equal(m.to_bool(), keep)
    assert m.nnz == keep.sum()


def test_csr_zero_and_identity():
    z = to_csr(np.zeros((4, 3)))
    assert z.nnz == 0 and list(z.row_offsets) == [0, 0, 0, 0, 0]
    eye = to_csr(np.eye(3))
    assert eye.nnz == 3 and list(eye.col_indices) == [0, 1, 2]


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.sampled_from([0.0, 0.0, 1.5, -2.25, 3.0])))
def test_csr_roundtrip(W):
    S = to_csr(W)
    np.testing.assert_array_equal(S.to_dense(), W)
    assert S.nnz == np.count_nonzero(W)


def test_csr_validator_rejects_bad_structure():
    with pytest.raises(ValueError):
        SparseMatrix(2, 2, np.array([0, 2, 1]), np.array([0]), np.array([1.0]))
    with pytest.raises(ValueError):
        SparseMatrix(1, 3, np.array([0, 2]), np.array([2, 1]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        SparseMatrix(1, 2, np.array([0, 1]), np.array([5]), np.array([1.0]))
    with pytest.raises(ValueError):
        SparseMatrix(1, 2, np.array([1, 1]), np.array([], dtype=int), np.array([]))
    with pytest.raises(ValueError):
        SparseMatrix(1, 1, np.array([0, 1]), np.array([0]), np.array([np.nan]))


def test_spmv_zero_input_runs_nothing(rng):
    S = to_csr(rng.standard_normal((6, 5)))
    y, macs = spmv_event_driven(S, np.zeros(5))
    assert macs == 0 and not y.any()


def test_spmv_dense_counts_everything(rng):
    W = rng.standard_normal((6, 5)) + 10.0
    _, macs = spmv_event_driven(to_csr(W), rng.standard_normal(5) + 10.0)
    assert macs == 30


def test_spmv_sparse_16x16(rng):
    W = rng.standard_normal((16, 16)) * (rng.random((16, 16)) < 0.1)
    x = rng.standard_normal(16) * (rng.random(16) < 0.5)
    y, macs = spmv_event_driven(to_csr(W), x)
    np.testing.assert_allclose(y, W @ x, rtol=1e-12, atol=1e-12)
    assert macs == brute_macs(W, x)


@given(st.integers(1, 20), st.integers(1, 20), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_spmv_integer_exact(rows, cols, wd, xd, seed):
    r = np.random.default_rng(seed)
    W = (r.integers(-127, 128, (rows, cols)) * (r.random((rows, cols)) < wd)).astype(np.int8)
    x = (r.integers(-32767, 32768, cols) * (r.random(cols) < xd)).astype(np.int64)
    y, macs = spmv_event_driven(to_csr(W), x)
    np.testing.assert_array_equal(y, dense_matvec(W, x))
    assert macs == brute_macs(W, x)


def test_spmv_dimension_errors(rng):
    S = to_csr(rng.standard_normal((3, 4)))
    with pytest.raises(DimensionError):
        spmv_event_driven(S, np.ones(3))
    with pytest.raises(TypeError):
        spmv_event_driven(to_csr(np.ones((2, 2), dtype=np.int8)), np.ones(2))
