"""Base covariance functions and their pairwise matrices.

Three stationary families are supported:

* ``matern``: the Matern model with sill 10^alpha, range ell, smoothness nu,
  k(x,x') = 10^alpha * 2^(1-nu)/Gamma(nu) * s^nu * K_nu(s),
  s = sqrt(2 nu) ||x-x'|| / ell, plus an optional nugget 10^tau added when
  the two sites have identical coordinates.
* ``sqexp``: the squared-exponential model
  10^alpha * exp(-||x-x'||^2 / (2 ell^2)), the nu -> infinity limit of the
  Matern family; nu is ignored.
* ``sphere-matern``: the Matern model driven by the chordal distance between
  (latitude, longitude) pairs on the unit sphere, so the model is isotropic
  on the sphere.

Parameters live in `KernelParams` with the convention
theta = (alpha, ell, nu, tau): alpha and tau are base-10 logarithms of the
sill and the nugget, tau=None means no nugget at all.

All functions are pure; evaluation of the Matern correlation is done in log
space through the exponentially scaled Bessel function ``kve`` so that large
smoothness values do not overflow prematurely.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

__all__ = [
    "MATERN",
    "SQEXP",
    "SPHERE_MATERN",
    "FAMILIES",
    "KernelParams",
    "KernelSpec",
    "kernel_eval",
    "kernel_matrix",
    "chordal_distance",
]

MATERN = "matern"
SQEXP = "sqexp"
SPHERE_MATERN = "sphere-matern"
FAMILIES = (MATERN, SQEXP, SPHERE_MATERN)

_LOG2 = np.log(2.0)
_LOG10 = np.log(10.0)


@dataclass(frozen=True)
class KernelParams:
    """Covariance parameters theta = (alpha, ell, nu, tau).

    alpha : log10 of the sill (marginal variance scale).
    ell   : range, in coordinate units; must be positive.
    nu    : smoothness; must be positive (ignored by sqexp).
    tau   : log10 of the nugget variance, or None for no nugget.
    """

    alpha: float
    ell: float
    nu: float
    tau: Optional[float] = None

    def __post_init__(self):
        for name in ("alpha", "ell", "nu"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.ell <= 0:
            raise ValueError(f"ell must be positive, got {self.ell}")
        if self.nu <= 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.tau is not None and not np.isfinite(self.tau):
            raise ValueError(f"tau must be finite or None, got {self.tau}")

    @property
    def sill(self):
        return 10.0 ** self.alpha

    @property
    def nugget(self):
        return 0.0 if self.tau is None else 10.0 ** self.tau


@dataclass(frozen=True)
class KernelSpec:
    """A covariance family bound to its parameters."""

    family: str
    params: KernelParams

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; expected one of {FAMILIES}"
            )


def chordal_distance(x, y):
    """Chordal (straight-line) distance between two unit-sphere sites.

    Sites are (latitude, longitude) pairs in radians with latitude in
    [-pi/2, pi/2].  The result lies in [0, 2]; antipodal points are at
    distance 2, the sphere's diameter.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (2,) or y.shape != (2,):
        raise ValueError("chordal distance requires (lat, lon) pairs")
    return float(_chordal_matrix(x[None, :], y[None, :])[0, 0])


def _chordal_matrix(X, Y):
    """Pairwise chordal distances between rows of X and rows of Y."""
    for A in (X, Y):
        lat = A[:, 0]
        if np.any(lat < -np.pi / 2) or np.any(lat > np.pi / 2):
            raise ValueError("latitude outside [-pi/2, pi/2]")
    dlat = 0.5 * (X[:, 0, None] - Y[None, :, 0])
    dlon = 0.5 * (X[:, 1, None] - Y[None, :, 1])
    h = np.sin(dlat) ** 2 + np.cos(X[:, 0, None]) * np.cos(Y[None, :, 0]) * np.sin(dlon) ** 2
    # distances are 2 sin(angle/2); clip tiny negatives from roundoff
    return 2.0 * np.sqrt(np.maximum(h, 0.0))


def _matern_log_corr(dist, ell, nu):
    """log of the unit-sill Matern correlation at the given distances.

    Evaluated as nu*log(s) + log(kve(nu, s)) - s + (1-nu)*log 2 - lgamma(nu)
    with s = sqrt(2 nu) * dist / ell.  kve = K_nu(s) * exp(s) stays bounded
    for large s; it overflows only when nu is so large that the r -> 0
    blow-up of K_nu exceeds double range, which is reported as an error.
    """
    s = np.sqrt(2.0 * nu) * dist / ell
    out = np.zeros_like(s)
    pos = s > 0
    sp = s[pos]
    if sp.size:
        kv = special.kve(nu, sp)
        if not np.all(np.isfinite(kv)) or np.any(kv <= 0):
            raise OverflowError(
                f"Bessel K_nu evaluation overflowed at nu={nu}; "
                "use the sqexp family for very smooth fields"
            )
        out[pos] = (
            nu * np.log(sp) + np.log(kv) - sp + (1.0 - nu) * _LOG2 - special.gammaln(nu)
        )
    return out


def _distance_matrix(spec, X, Y):
    if spec.family == SPHERE_MATERN:
        if X.shape[1] != 2:
            raise ValueError("sphere-matern requires (lat, lon) sites")
        return _chordal_matrix(X, Y)
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _same_site_mask(X, Y):
    # bitwise coordinate comparison, so the nugget fires exactly on identity
    Xb = np.ascontiguousarray(X, dtype=np.float64).view(np.uint64)
    Yb = np.ascontiguousarray(Y, dtype=np.float64).view(np.uint64)
    return (Xb[:, None, :] == Yb[None, :, :]).all(axis=2)


def kernel_matrix(spec, X, Y):
    """Pairwise covariance matrix k(X, Y).

    X, Y are (n, d) and (m, d) arrays of sites (rows).  Entry (i, j) equals
    kernel_eval(spec, X[i], Y[j]); with a nugget present, 10^tau is added at
    every pair with identical coordinates, which for X = Y is the diagonal.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("empty site list")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"site dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    p = spec.params
    dist = _distance_matrix(spec, X, Y)
    if spec.family == SQEXP:
        K = p.sill * np.exp(-(dist ** 2) / (2.0 * p.ell ** 2))
    else:
        K = p.sill * np.exp(_matern_log_corr(dist, p.ell, p.nu))
    if p.tau is not None:
        K = K + p.nugget * _same_site_mask(X, Y)
    return K


def kernel_eval(spec, x, y):
    """Covariance k(x, y) between two sites."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"site dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return float(kernel_matrix(spec, x[None, :], y[None, :])[0, 0])
