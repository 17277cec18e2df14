"""Tests for the dense brute-force reference implementations."""

import math

import numpy as np
import pytest

from hgrf.grf import FieldData, sample, standard_normal
from hgrf.hcov import build_hcov, kernel_matrix, kh_eval
from hgrf.kernels import KernelParams, KernelSpec, kernel_eval
from hgrf.oracle import (
    DENSE_LIMIT,
    dense_chol,
    dense_kh,
    dense_krige,
    dense_logdet,
    dense_loglik,
    dense_lu,
    dense_solve,
)
from hgrf.partition import build_tree
from hgrf.rlr import to_dense

from conftest import single_site_tree


def make_hcov(n, rank, seed=0, alpha=0.0, ell=0.45, nu=1.5, tau=-2.0):
    X = np.random.default_rng(seed).random((n, 2))
    tree = build_tree(X, rank=rank)
    spec = KernelSpec("matern", KernelParams(alpha=alpha, ell=ell, nu=nu, tau=tau))
    return build_hcov(spec, tree)


def spd_matrix(n, seed):
    B = np.random.default_rng(seed).standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


class TestDenseKh:
    def test_matches_factored_assembly(self):
        """Pairwise evaluation agrees with the factored dense form."""
        h = make_hcov(96, 8)
        K = dense_kh(h)
        F = to_dense(h.Kh)
        assert np.allclose(K, F, rtol=1e-12, atol=1e-13)
        assert np.array_equal(K, K.T)

    def test_single_site_closed_form(self):
        """One site gives the sill plus nugget."""
        tree = single_site_tree()
        spec = KernelSpec("matern", KernelParams(alpha=0.3, ell=0.4, nu=1.5, tau=-0.7))
        h = build_hcov(spec, tree)
        K = dense_kh(h)
        assert K.shape == (1, 1)
        assert K[0, 0] == pytest.approx(10.0 ** 0.3 + 10.0 ** -0.7, rel=1e-15)

    def test_size_guard(self):
        """Problems beyond the dense limit are refused."""
        with pytest.raises(ValueError, match="limited to 4096"):
            dense_chol(np.eye(DENSE_LIMIT + 1))


class TestDenseChol:
    def test_factor_reconstructs_spd_matrix(self):
        """L is lower triangular with L L^T = A, matching the library."""
        A = spd_matrix(50, 3)
        L = dense_chol(A)
        assert np.allclose(np.triu(L, 1), 0.0)
        assert np.allclose(L @ L.T, A, rtol=1e-11, atol=1e-11)
        assert np.allclose(L, np.linalg.cholesky(A), rtol=1e-11, atol=1e-12)

    def test_rejects_indefinite_matrix(self):
        """A negative pivot ends the factorization with an error."""
        A = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(np.linalg.LinAlgError, match="not positive definite"):
            dense_chol(A)

    def test_rejects_nonsquare(self):
        """Rectangular input is a usage error."""
        with pytest.raises(ValueError, match="must be square"):
            dense_chol(np.ones((3, 2)))


class TestDenseLu:
    def test_reconstructs_row_permuted_matrix(self):
        """The packed factors satisfy A[piv] = L U."""
        A = np.random.default_rng(4).standard_normal((40, 40))
        M, piv, swaps = dense_lu(A)
        L = np.tril(M, -1) + np.eye(40)
        U = np.triu(M)
        assert np.allclose(A[piv], L @ U, rtol=1e-11, atol=1e-11)
        assert swaps >= 0

    def test_pivoting_swap_is_counted(self):
        """A matrix with a zero leading entry needs exactly one row swap."""
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        M, piv, swaps = dense_lu(A)
        assert swaps == 1
        assert list(piv) == [1, 0]


class TestDenseSolve:
    def test_matches_library_solve(self):
        """Vector and matrix right-hand sides agree with the library."""
        A = spd_matrix(50, 5)
        rng = np.random.default_rng(6)
        b = rng.standard_normal(50)
        B = rng.standard_normal((50, 3))
        assert np.allclose(dense_solve(A, b), np.linalg.solve(A, b),
                           rtol=1e-11, atol=1e-12)
        assert np.allclose(dense_solve(A, B), np.linalg.solve(A, B),
                           rtol=1e-11, atol=1e-12)

    def test_residual_is_small(self):
        """The computed solution satisfies the system."""
        A = spd_matrix(30, 7)
        b = np.random.default_rng(8).standard_normal(30)
        x = dense_solve(A, b)
        assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_singular_matrix_raises(self):
        """Exactly dependent rows are detected."""
        with pytest.raises(np.linalg.LinAlgError, match="singular"):
            dense_solve(np.ones((3, 3)), np.ones(3))


class TestDenseLogdet:
    def test_identity_is_zero(self):
        """log|det I| = 0 with positive sign, exactly."""
        ld = dense_logdet(np.eye(12))
        assert ld.log_abs == 0.0
        assert ld.sign == 1

    def test_matches_library_slogdet(self):
        """Random SPD and nonsymmetric matrices agree with the library."""
        for seed, make in ((1, spd_matrix), (2, None)):
            A = (make(25, seed) if make
                 else np.random.default_rng(seed).standard_normal((25, 25)))
            sign, ld = np.linalg.slogdet(A)
            got = dense_logdet(A)
            assert got.sign == int(sign)
            assert got.log_abs == pytest.approx(ld, rel=1e-11, abs=1e-11)

    def test_negative_determinant_sign(self):
        """A single row swap flips the sign."""
        ld = dense_logdet(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert ld.sign == -1
        assert ld.log_abs == 0.0

    def test_singular_matrix_signals_zero(self):
        """A singular matrix yields sign 0 and -inf magnitude."""
        ld = dense_logdet(np.ones((3, 3)))
        assert ld.sign == 0
        assert ld.log_abs == -np.inf


class TestDenseKrige:
    def test_matches_direct_formula(self):
        """Mean and variance match the textbook expressions on k_h."""
        h = make_hcov(48, 8, seed=2)
        z = sample(h, 3, mean=1.2)
        data = FieldData(sites=h.tree.sites, values=z, mean=1.2)
        K = dense_kh(h)
        zt = h.tree.to_tree_order(z) - 1.2
        for x0 in np.random.default_rng(9).random((5, 2)):
            k0 = np.array([kh_eval(h, s, x0) for s in h.tree.sites])
            mu_ref = 1.2 + k0 @ np.linalg.solve(K, zt)
            var_ref = kh_eval(h, x0, x0) - k0 @ np.linalg.solve(K, k0)
            mu0, var0 = dense_krige(h, data, x0)
            assert mu0 == pytest.approx(mu_ref, rel=1e-10, abs=1e-12)
            assert var0 == pytest.approx(var_ref, rel=1e-10, abs=1e-12)

    def test_rejects_replicated_values(self):
        """Kriging is defined for a single realization only."""
        h = make_hcov(32, 4, seed=3)
        data = FieldData(sites=h.tree.sites,
                         values=np.ones((32, 2)))
        with pytest.raises(ValueError, match="single realization"):
            dense_krige(h, data, np.array([0.5, 0.5]))


class TestDenseLoglik:
    def test_single_site_closed_form(self):
        """One observation reduces to the scalar Gaussian density."""
        tree = single_site_tree()
        spec = KernelSpec("matern", KernelParams(alpha=0.3, ell=0.4, nu=1.5, tau=-0.7))
        h = build_hcov(spec, tree)
        z = 0.9
        data = FieldData(sites=tree.sites, values=np.array([z]))
        v = 10.0 ** 0.3 + 10.0 ** -0.7
        expected = -0.5 * z * z / v - 0.5 * math.log(v) - 0.5 * math.log(2 * math.pi)
        assert dense_loglik(h, data) == pytest.approx(expected, rel=1e-14)

    def test_replicates_add(self):
        """Independent replicates contribute additively."""
        h = make_hcov(40, 4, seed=5)
        Z = np.column_stack([sample(h, 11), sample(h, 12)])
        joint = dense_loglik(h, FieldData(sites=h.tree.sites, values=Z))
        parts = sum(
            dense_loglik(h, FieldData(sites=h.tree.sites, values=Z[:, j]))
            for j in range(2))
        assert joint == pytest.approx(parts, rel=1e-12)
