import numpy as np
import pytest

import fbquant.linalg as la
from fbquant.errors import ConvergenceError, ShapeError


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 5))
        assert np.array_equal(la.matmul(np.eye(2), m), m)

    def test_hand_example(self):
        out = la.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
        assert np.array_equal(out, [[17.0], [39.0]])

    def test_empty_inner_dimension(self):
        out = la.matmul(np.zeros((3, 0)), np.zeros((0, 2)))
        assert out.shape == (3, 2)
        assert np.array_equal(out, np.zeros((3, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            la.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity_within_tolerance(self, rng):
        for _ in range(20):
            a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
            lhs = la.matmul(la.matmul(a, b), c)
            rhs = la.matmul(a, la.matmul(b, c))
            bound = 1e-12 * np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
            assert np.linalg.norm(lhs - rhs) <= bound

    def test_repeat_runs_bit_identical(self, rng):
        a = rng.standard_normal((33, 17))
        b = rng.standard_normal((17, 9))
        assert np.array_equal(la.matmul(a, b), la.matmul(a, b))


class TestFrobenius:
    def test_zeros(self):
        assert la.frobenius_sq(np.zeros((4, 4))) == 0.0

    def test_three_four(self):
        assert la.frobenius_sq(np.array([[3.0, 4.0]])) == 25.0

    def test_equals_trace_of_gram(self, rng):
        a = rng.standard_normal((6, 9))
        assert la.frobenius_sq(a) == pytest.approx(np.trace(la.matmul(a, a.T)), rel=1e-12)


class TestGram:
    def test_identity(self):
        assert np.allclose(la.gram(np.eye(3)), np.eye(3))

    def test_outer_product(self):
        assert np.allclose(la.gram(np.array([[1.0, 2.0]])), [[1.0, 2.0], [2.0, 4.0]])

    def test_bitwise_symmetric(self, rng):
        g = la.gram(rng.standard_normal((11, 23)))
        assert np.array_equal(g, g.T)

    def test_rank_bound(self, rng):
        x = rng.standard_normal((4, 9))
        assert np.linalg.matrix_rank(la.gram(x)) <= min(x.shape)

    def test_positive_semidefinite(self, rng):
        g = la.gram(rng.standard_normal((5, 8)))
        assert np.linalg.eigvalsh(g).min() >= -1e-12


class TestTruncatedSvd:
    def test_diagonal(self):
        res = la.truncated_svd(np.diag([3.0, 2.0, 1.0]), k=2)
        assert np.allclose(res.s, [3.0, 2.0])

    def test_rank_one(self, rng):
        u = rng.standard_normal(7)
        v = rng.standard_normal(5)
        res = la.truncated_svd(np.outer(u, v), k=1)
        assert res.s[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-12)
        recon = res.u @ np.diag(res.s) @ res.v
        assert np.abs(recon - np.outer(u, v)).max() < 1e-12

    def test_residual_matches_discarded_singular_values(self, rng):
        # Oracle: LAPACK's full SVD, an independent route from the Jacobi one.
        a = rng.standard_normal((8, 6))
        res = la.truncated_svd(a, k=3)
        recon = res.u @ np.diag(res.s) @ res.v
        residual = np.linalg.norm(a - recon)
        s_full = np.linalg.svd(a, compute_uv=False)
        assert residual == pytest.approx(np.sqrt((s_full[3:] ** 2).sum()), abs=1e-10)

    def test_matches_lapack_singular_values(self, rng):
        for shape in [(5, 9), (9, 5), (6, 6), (1, 4)]:
            a = rng.standard_normal(shape)
            res = la.truncated_svd(a, k=min(shape))
            assert np.allclose(res.s, np.linalg.svd(a, compute_uv=False), atol=1e-10)

    def test_full_reconstruction(self, rng):
        a = rng.standard_normal((7, 7))
        res = la.truncated_svd(a, k=7)
        assert np.linalg.norm(res.u @ np.diag(res.s) @ res.v - a) <= 1e-10 * np.linalg.norm(a)

    def test_error_nonincreasing_in_k(self, rng):
        a = rng.standard_normal((9, 7))
        errs = []
        for k in range(8):
            res = la.truncated_svd(a, k)
            errs.append(np.linalg.norm(a - res.u @ np.diag(res.s) @ res.v))
        assert all(e1 >= e2 - 1e-12 for e1, e2 in zip(errs, errs[1:]))

    def test_k_out_of_range(self):
        with pytest.raises(ShapeError):
            la.truncated_svd(np.eye(3), k=4)

    def test_convergence_error_carries_residual(self, rng, monkeypatch):
        monkeypatch.setattr(la, "_JACOBI_MAX_SWEEPS", 1)
        with pytest.raises(ConvergenceError) as info:
            la.truncated_svd(rng.standard_normal((12, 12)), k=2)
        assert info.value.residual > 0


class TestGramNullBasis:
    def test_single_row(self):
        basis = la.gram_null_basis(np.array([[1.0, 0.0, 0.0]]))
        assert basis.shape == (2, 3)
        # Spans the e2/e3 plane: orthonormal rows with zero first component.
        assert np.allclose(basis[:, 0], 0.0)
        assert np.allclose(basis @ basis.T, np.eye(2), atol=1e-12)

    def test_full_rank_square(self, rng):
        x = rng.standard_normal((6, 6)) + 3 * np.eye(6)
        assert la.gram_null_basis(x).shape == (0, 6)

    def test_random_wide(self, rng):
        x = rng.standard_normal((4, 16))
        basis = la.gram_null_basis(x)
        g = la.gram(x)
        assert basis.shape == (12, 16)
        norms = np.linalg.norm(basis @ g, axis=1)
        assert norms.max() <= 1e-9

    def test_against_eigendecomposition_oracle(self, rng):
        x = rng.standard_normal((5, 12))
        g = la.gram(x)
        eigvals, eigvecs = np.linalg.eigh(g)
        expected_q = int((eigvals <= la.RANK_TOL * eigvals.max()).sum())
        basis = la.gram_null_basis(x)
        assert basis.shape[0] == expected_q
        # Rows orthogonal to every eigenvector with a nonzero eigenvalue.
        keep = eigvecs[:, eigvals > la.RANK_TOL * eigvals.max()]
        assert np.abs(basis @ keep).max() < 1e-9

    def test_zero_matrix_spans_everything(self):
        basis = la.gram_null_basis(np.zeros((3, 5)))
        assert basis.shape == (5, 5)
        assert np.allclose(basis @ basis.T, np.eye(5))
