"""Dense brute-force references for validating the factored algorithms.

Everything here is deliberately slow and simple: covariance matrices are
assembled entry by entry from the covariance function itself, and the linear
algebra (Cholesky, LU with partial pivoting, triangular solves) is written
out directly rather than delegated to a library, so that agreement between
the fast structured algorithms and these routines is evidence about the
algorithms and not about a shared backend.

All entry points refuse problems larger than 4096 sites.
"""

import math

import numpy as np

from .hcov import kh_eval
from .rlr import LogDet

__all__ = [
    "DENSE_LIMIT",
    "dense_kh", "dense_chol", "dense_lu", "dense_solve",
    "dense_logdet", "dense_krige", "dense_loglik",
]

DENSE_LIMIT = 4096


def _guard(n):
    if n > DENSE_LIMIT:
        raise ValueError(f"dense oracle is limited to {DENSE_LIMIT} sites, got {n}")


def dense_kh(h):
    """k_h(X, X) assembled pairwise in tree order, mirrored from i <= j."""
    tree = h.tree
    _guard(tree.n)
    X = tree.sites
    K = np.empty((tree.n, tree.n))
    for i in range(tree.n):
        for j in range(i, tree.n):
            v = kh_eval(h, X[i], X[j])
            K[i, j] = v
            K[j, i] = v
    return K


def dense_chol(A):
    """Unpivoted lower Cholesky factor, one column at a time."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    _guard(n)
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    L = np.zeros((n, n))
    for j in range(n):
        d = A[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise np.linalg.LinAlgError(
                f"matrix is not positive definite: pivot {j} is {d}"
            )
        L[j, j] = math.sqrt(d)
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def dense_lu(A):
    """Partial-pivoting LU: returns (packed LU, pivot rows, swap count)."""
    M = np.array(A, dtype=float)
    n = M.shape[0]
    _guard(n)
    if M.shape != (n, n):
        raise ValueError("matrix must be square")
    piv = np.arange(n)
    swaps = 0
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if p != k:
            M[[k, p]] = M[[p, k]]
            piv[[k, p]] = piv[[p, k]]
            swaps += 1
        if M[k, k] != 0.0:
            M[k + 1:, k] /= M[k, k]
            M[k + 1:, k + 1:] -= np.outer(M[k + 1:, k], M[k, k + 1:])
    return M, piv, swaps


def dense_solve(A, b):
    """Solve A x = b through the hand-rolled LU with partial pivoting."""
    M, piv, _ = dense_lu(A)
    n = M.shape[0]
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    x = (b[:, None] if single else b)[piv].astype(float, copy=True)
    if np.any(np.diag(M) == 0.0):
        raise np.linalg.LinAlgError("matrix is singular")
    for i in range(1, n):
        x[i] -= M[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] -= M[i, i + 1:] @ x[i + 1:]
        x[i] /= M[i, i]
    return x[:, 0] if single else x


def dense_logdet(A):
    """Determinant in log-magnitude/sign form, from the hand-rolled LU."""
    M, _, swaps = dense_lu(A)
    diag = np.diag(M)
    if np.any(diag == 0.0):
        return LogDet(log_abs=-np.inf, sign=0)
    sign = (-1) ** (swaps + int(np.sum(diag < 0.0)))
    return LogDet(log_abs=float(np.sum(np.log(np.abs(diag)))), sign=int(sign))


def dense_krige(h, data, x0):
    """Kriging mean and variance at x0 with k_h used throughout.

    Both the cross-covariance vector k0 and the matrix K are built from the
    hierarchical covariance, matching what the fast path approximates
    nothing of: (mu0, var0) should agree to roundoff.
    """
    tree = h.tree
    _guard(tree.n)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    v = np.asarray(data.values, dtype=float)
    if v.ndim != 1:
        raise ValueError("kriging expects a single realization, values of shape (n,)")
    K = dense_kh(h)
    zt = tree.to_tree_order(v) - data.mean
    k0 = np.array([kh_eval(h, tree.sites[i], x0) for i in range(tree.n)])
    sol = dense_solve(K, np.column_stack([zt, k0]))
    mu0 = data.mean + float(k0 @ sol[:, 0])
    var0 = kh_eval(h, x0, x0) - float(k0 @ sol[:, 1])
    return mu0, var0


def dense_loglik(h, data):
    """Gaussian log-likelihood via the dense covariance and hand solves."""
    tree = h.tree
    _guard(tree.n)
    K = dense_kh(h)
    v = np.asarray(data.values, dtype=float)
    z = tree.to_tree_order(v if v.ndim == 2 else v[:, None]) - data.mean
    ld = dense_logdet(K)
    if ld.sign != 1:
        raise np.linalg.LinAlgError("covariance determinant is not positive")
    quad = float(np.sum(z * dense_solve(K, z)))
    nreps = z.shape[1]
    return -0.5 * quad - 0.5 * nreps * ld.log_abs - 0.5 * nreps * tree.n * math.log(2.0 * math.pi)
