import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqkv import kernels
from seqkv.errors import DegenerateRowError, DimensionError, NumericError, ParameterError

F32 = np.float32


def mat(data):
    return np.asarray(data, dtype=F32)


class TestMatmul:
    def test_identity(self):
        a = mat(np.arange(9).reshape(3, 3))
        assert np.array_equal(kernels.matmul(np.eye(3, dtype=F32), a), a)

    def test_hand_product(self):
        out = kernels.matmul(mat([[1, 2], [3, 4]]), mat([[5], [6]]))
        assert np.array_equal(out, mat([[17], [39]]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            kernels.matmul(np.zeros((2, 3), F32), np.zeros((4, 5), F32))

    def test_non_finite_rejected(self):
        bad = np.full((2, 2), np.inf, dtype=F32)
        with pytest.raises(NumericError):
            kernels.matmul(bad, np.zeros((2, 2), F32))

    @given(
        a=arrays(F32, (3, 4), elements=st.floats(-10, 10, width=32)),
        b=arrays(F32, (4, 2), elements=st.floats(-10, 10, width=32)),
        c=arrays(F32, (2, 5), elements=st.floats(-10, 10, width=32)),
    )
    @settings(max_examples=50, deadline=None)
    def test_associativity(self, a, b, c):
        left = kernels.matmul(kernels.matmul(a, b), c)
        right = kernels.matmul(a, kernels.matmul(b, c))
        scale = max(np.abs(left).max(), np.abs(right).max(), 1.0)
        assert np.abs(left - right).max() / scale < 1e-4


class TestSoftmaxRows:
    def test_uniform(self):
        out = kernels.softmax_rows(mat([[0, 0, 0]]))
        np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-7)

    def test_large_logit_stable(self):
        out = kernels.softmax_rows(mat([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    def test_log_ratio_oracle(self):
        out = kernels.softmax_rows(np.log(mat([[1, 2, 3]])))
        np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-7)

    def test_rows_sum_to_one(self, rng):
        out = kernels.softmax_rows(rng.standard_normal((5, 9)).astype(F32) * 10)
        np.testing.assert_allclose(out.sum(axis=1), np.ones(5), atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            kernels.softmax_rows(mat([[np.nan, 0.0]]))

    @given(
        x=arrays(F32, (2, 4), elements=st.floats(-20, 20, width=32)),
        shift=st.floats(-50, 50),
    )
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, x, shift):
        shifted = (x.astype(np.float64) + shift).astype(F32)
        base = kernels.softmax_rows(x)
        moved = kernels.softmax_rows(shifted)
        assert np.abs(base - moved).max() < 1e-5


class TestTruncatedSvd:
    def test_diagonal(self):
        comps, sv = kernels.truncated_svd(np.diag([3.0, 2.0, 1.0]).astype(F32), 2)
        np.testing.assert_allclose(sv, [3.0, 2.0], atol=1e-7)
        np.testing.assert_allclose(np.abs(comps), np.eye(3)[:2], atol=1e-6)

    def test_full_rank_reconstruction_exact(self, rng):
        x = rng.standard_normal((6, 4)).astype(F32)
        comps, _ = kernels.truncated_svd(x, 4)
        c = comps.astype(np.float64)
        recon = c.T @ (c @ x.astype(np.float64))
        assert np.abs(recon - x).max() < 1e-6

    def test_projection_error_matches_full_svd_tail(self, rng):
        x = rng.standard_normal((8, 5)).astype(F32)
        comps, _ = kernels.truncated_svd(x, 3)
        c = comps.astype(np.float64)
        resid = x.astype(np.float64) - c.T @ (c @ x.astype(np.float64))
        tail = np.sum(np.linalg.svd(x.astype(np.float64), compute_uv=False)[3:] ** 2)
        assert abs(np.sum(resid**2) - tail) < 1e-6 * max(1.0, tail)

    def test_k_out_of_range(self):
        with pytest.raises(ParameterError):
            kernels.truncated_svd(np.ones((3, 3), F32), 0)
        with pytest.raises(ParameterError):
            kernels.truncated_svd(np.ones((3, 5), F32), 4)

    def test_error_monotone_in_k(self, rng):
        x = rng.standard_normal((7, 7)).astype(F32)
        errs = []
        for k in range(1, 8):
            comps, _ = kernels.truncated_svd(x, k)
            c = comps.astype(np.float64)
            resid = x.astype(np.float64) - c.T @ (c @ x.astype(np.float64))
            errs.append(np.sum(resid**2))
        assert all(a >= b - 1e-9 for a, b in zip(errs, errs[1:]))

    def test_components_orthonormal_and_sign_fixed(self, rng):
        x = rng.standard_normal((5, 9)).astype(F32)
        comps, sv = kernels.truncated_svd(x, 4)
        gram = comps.astype(np.float64) @ comps.astype(np.float64).T
        assert np.abs(gram - np.eye(4)).max() < 1e-6
        assert np.all(np.diff(sv) <= 1e-9) and np.all(sv >= 0)
        for row in comps:
            assert row[int(np.argmax(np.abs(row)))] >= 0

    def test_rank_deficient_padding(self):
        x = np.zeros((4, 6), dtype=F32)
        x[0, 0] = 2.0
        comps, sv = kernels.truncated_svd(x, 3)
        gram = comps.astype(np.float64) @ comps.astype(np.float64).T
        assert np.abs(gram - np.eye(3)).max() < 1e-6
        np.testing.assert_allclose(sv, [2.0, 0.0, 0.0], atol=1e-6)

    def test_tall_matrix_branch(self, rng):
        x = rng.standard_normal((9, 3)).astype(F32)
        comps, sv = kernels.truncated_svd(x, 2)
        ref = np.linalg.svd(x.astype(np.float64), compute_uv=False)
        np.testing.assert_allclose(sv, ref[:2], rtol=1e-6)
        gram = comps.astype(np.float64) @ comps.astype(np.float64).T
        assert np.abs(gram - np.eye(2)).max() < 1e-6


class TestPairwiseCosine:
    def test_identical_rows(self):
        sim = kernels.pairwise_cosine(mat([[1, 2, 3], [2, 4, 6]]))
        np.testing.assert_allclose(sim, np.ones((2, 2)), atol=1e-6)

    def test_orthogonal_rows(self):
        sim = kernels.pairwise_cosine(np.eye(2, dtype=F32))
        np.testing.assert_allclose(sim, np.eye(2), atol=1e-7)

    def test_hand_value(self):
        sim = kernels.pairwise_cosine(mat([[1, 0], [1, 1]]))
        np.testing.assert_allclose(sim[0, 1], 1 / np.sqrt(2), atol=1e-6)

    def test_zero_row_rejected_with_index(self):
        with pytest.raises(DegenerateRowError) as exc:
            kernels.pairwise_cosine(mat([[1, 0], [0, 0], [0, 1]]))
        assert exc.value.rows == (1,)

    def test_properties(self, rng):
        sim = kernels.pairwise_cosine(rng.standard_normal((6, 4)).astype(F32))
        assert np.array_equal(sim, sim.T)
        np.testing.assert_allclose(np.diag(sim), 1.0)
        assert sim.min() >= -1.0 and sim.max() <= 1.0

    def test_scale_invariance(self, rng):
        x = rng.standard_normal((5, 3)).astype(F32)
        scaled = (x * rng.uniform(0.5, 4.0, size=(5, 1))).astype(F32)
        assert np.abs(kernels.pairwise_cosine(x) - kernels.pairwise_cosine(scaled)).max() < 1e-5


class TestRowCosines:
    def test_matching_and_zero_rows(self):
        a = mat([[1, 0], [0, 0], [1, 1]])
        b = mat([[2, 0], [0, 0], [0, 0]])
        out = kernels.row_cosines(a, b)
        np.testing.assert_allclose(out, [1.0, 1.0, 0.0], atol=1e-7)
