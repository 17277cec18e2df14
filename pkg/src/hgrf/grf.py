"""Gaussian random field operations under a hierarchical covariance.

Everything here works through the factored forms: sampling multiplies the
generalized Cholesky factor onto white noise, log-likelihoods use the
factored inverse and determinant, and kriging combines one factored
inversion with the out-of-sample inner-product and quadratic-form caches so
that each prediction site costs O(r^2 log(n/r)) after an O(n r^2) setup.

Field data lives in the caller's site order; the permutation into tree order
is applied at these entry points only.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .hcov import inner_preprocess, oos_inner, oos_quad, quad_preprocess
from .kernels import kernel_eval
from .rlr import cholesky_like, invert, matvec

__all__ = [
    "FieldData", "KrigeResult", "KrigeWorkspace",
    "standard_normal", "sample", "krige_prepare", "krige",
    "loglik", "loglik_reps",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FieldData:
    """Observed field values at a set of sites.

    values has shape (n,) for a single realization or (n, N) for N
    independent replicates sharing the sites; mean is the constant process
    mean.
    """

    sites: np.ndarray
    values: np.ndarray
    mean: float = 0.0

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float)
        if self.sites.ndim == 1:
            self.sites = self.sites[:, None]
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (1, 2) or self.values.shape[0] != self.sites.shape[0]:
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{self.sites.shape[0]} sites"
            )
        self.mean = float(self.mean)


def _check_sites(h, data):
    tree = h.tree
    if data.sites.shape != tree.sites.shape or not np.array_equal(
        tree.to_tree_order(data.sites), tree.sites
    ):
        raise ValueError("data sites do not match the sites the tree was built on")


def standard_normal(n, seed):
    """n standard normal deviates from a counter-based generator.

    Uniforms are taken as bit-exact dyadic midpoints and pushed through the
    inverse normal CDF, so streams are reproducible across platforms and
    independent of how many deviates are drawn at once.
    """
    from scipy.special import ndtri

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    u = (rng.integers(0, 1 << 53, size=n, dtype=np.uint64).astype(float) + 0.5) / float(1 << 53)
    return ndtri(u)


def sample(h, seed, mean=0.0, noise=None):
    """Draw one field realization z = mean + G y with K_h = G G^T.

    noise overrides the generated y (length n, tree order) for tests; the
    returned values follow the original site order of the tree input.
    """
    tree = h.tree
    G = cholesky_like(h.Kh)
    y = standard_normal(tree.n, seed) if noise is None else np.asarray(noise, dtype=float)
    if y.shape != (tree.n,):
        raise ValueError(f"noise must have shape ({tree.n},), got {y.shape}")
    return float(mean) + tree.from_tree_order(matvec(G, y))


@dataclass
class KrigeWorkspace:
    """Prepared state shared by every prediction site: the factored inverse,
    the weight vector, and the two out-of-sample caches."""

    hcov: object
    atil: object
    w: np.ndarray
    inner: object
    quad: object
    mean: float
    var_clamps: int = field(default=0)


@dataclass(frozen=True)
class KrigeResult:
    """Predictive mean and variance at one site."""

    mu0: float
    var0: float


def krige_prepare(h, data, atil=None):
    """Factor K_h once and build the per-site caches for kriging.

    The weight vector w = K_h^{-1} (z - mean) drives the predictive mean and
    the factored inverse drives the predictive variance; both are reduced to
    path walks by the out-of-sample preprocessing sweeps.  A previously
    computed (e.g. reloaded) inverse can be passed in to skip the
    factorization.
    """
    _check_sites(h, data)
    if data.values.ndim != 1:
        raise ValueError("kriging expects a single realization, values of shape (n,)")
    if atil is None:
        atil, ld = invert(h.Kh)
        if ld.sign != 1:
            raise np.linalg.LinAlgError(
                "covariance matrix has a nonpositive determinant; it is not positive definite"
            )
    z = h.tree.to_tree_order(data.values) - data.mean
    w = matvec(atil, z)
    return KrigeWorkspace(
        hcov=h,
        atil=atil,
        w=w,
        inner=inner_preprocess(h, w),
        quad=quad_preprocess(h, atil),
        mean=data.mean,
    )


def krige(h, data, x0, work):
    """Predictive mean and variance of the field at out-of-sample x0.

    mu0 = mean + k0^T K_h^{-1} (z - mean) and var0 = k_h(x0,x0) -
    k0^T K_h^{-1} k0 with k0 = k_h(X, x0).  Tiny negative variances from
    roundoff are clamped to zero and counted on the workspace.
    """
    if work is None or work.hcov is not h:
        raise ValueError("krige requires a workspace prepared for this covariance")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    mu0 = work.mean + oos_inner(work.inner, x0)
    var0 = kernel_eval(h.spec, x0, x0) - oos_quad(work.quad, x0)
    if var0 < 0.0:
        work.var_clamps += 1
        var0 = 0.0
    return KrigeResult(mu0=float(mu0), var0=float(var0))


def loglik(h, data):
    """Gaussian log-likelihood of one realization under K_h."""
    _check_sites(h, data)
    v = data.values
    if v.ndim == 2:
        if v.shape[1] != 1:
            raise ValueError("multiple replicates: use loglik_reps")
        v = v[:, 0]
    atil, ld = invert(h.Kh)
    if ld.sign != 1:
        raise np.linalg.LinAlgError(
            "covariance matrix has a nonpositive determinant; it is not positive definite"
        )
    z = h.tree.to_tree_order(v) - data.mean
    quad = float(z @ matvec(atil, z))
    n = h.tree.n
    return -0.5 * quad - 0.5 * ld.log_abs - 0.5 * n * _LOG_2PI


def loglik_reps(h, data):
    """Joint log-likelihood of independent replicates, one inversion total."""
    _check_sites(h, data)
    v = data.values
    if v.ndim == 1:
        v = v[:, None]
    atil, ld = invert(h.Kh)
    if ld.sign != 1:
        raise np.linalg.LinAlgError(
            "covariance matrix has a nonpositive determinant; it is not positive definite"
        )
    z = h.tree.to_tree_order(v) - data.mean
    quad = float(np.sum(z * matvec(atil, z)))
    n = h.tree.n
    nreps = v.shape[1]
    return -0.5 * quad - 0.5 * nreps * ld.log_abs - 0.5 * nreps * n * _LOG_2PI
