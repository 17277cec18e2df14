"""Maximum-likelihood estimation of covariance parameters.

The log-likelihood is maximized with a derivative-free Nelder-Mead search.
Box bounds on the free parameters are enforced by a logistic reparameterization
onto the whole real line, so the simplex can never step outside the box and
the convergence tolerances (simplex diameter 1e-4, function spread 1e-6) are
measured in the transformed coordinates.  The first search starts from a wide
simplex (side 0.5 in transformed units): likelihood surfaces here often have
long curved ridges on which a small simplex collapses far from the optimum.
The search then restarts once from its own optimum with a moderate simplex
(side 0.05) to polish and to confirm the optimum is stable.

Standard errors come from a central finite-difference Hessian of the
log-likelihood in the original coordinates at the optimum; likelihood slices
evaluate an outer-product grid for diagnostics.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .grf import loglik, loglik_reps
from .hcov import build_hcov
from .kernels import KernelParams, KernelSpec

__all__ = [
    "PARAM_NAMES", "ParamSpace", "FitResult",
    "fit_mle", "fit_nu_sweep", "std_errors", "fd_hessian",
    "loglik_slice", "slice_csv",
]

PARAM_NAMES = ("alpha", "ell", "nu", "tau")


@dataclass(frozen=True)
class ParamSpace:
    """Which covariance parameters are searched over, and inside which box.

    free lists the searched names in order; bounds maps each free name to
    (lo, hi); fixed pins every remaining parameter (tau may be pinned to
    None, meaning no nugget term at all).
    """

    free: tuple
    bounds: dict
    fixed: dict

    def __post_init__(self):
        if len(set(self.free)) != len(self.free):
            raise ValueError("duplicate free parameter names")
        for name in self.free:
            if name not in PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            if name not in self.bounds:
                raise ValueError(f"free parameter {name!r} has no bounds")
            lo, hi = self.bounds[name]
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds for {name!r} must be finite with lo < hi")
            if name in ("ell", "nu") and lo <= 0:
                raise ValueError(f"lower bound for {name!r} must be positive")
        for name in PARAM_NAMES:
            if name in self.free:
                continue
            if name == "tau":
                continue
            if name not in self.fixed:
                raise ValueError(f"parameter {name!r} is neither free nor fixed")
        for name in self.fixed:
            if name not in PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            if name in self.free:
                raise ValueError(f"parameter {name!r} is both free and fixed")

    def params_from_vector(self, vec):
        """KernelParams with the free slots filled from vec."""
        d = dict(self.fixed)
        d.setdefault("tau", None)
        for name, v in zip(self.free, vec):
            d[name] = float(v)
        return KernelParams(**d)

    def vector_from(self, init):
        """Free-parameter values pulled out of a dict or KernelParams."""
        get = init.get if isinstance(init, dict) else lambda k: getattr(init, k)
        vec = np.array([float(get(name)) for name in self.free])
        for name, v in zip(self.free, vec):
            lo, hi = self.bounds[name]
            if not lo < v < hi:
                raise ValueError(f"initial {name}={v} is not strictly inside ({lo}, {hi})")
        return vec

    def to_internal(self, vec):
        """Map bounded free values onto the real line (inverse logistic)."""
        t = np.empty(len(self.free))
        for k, name in enumerate(self.free):
            lo, hi = self.bounds[name]
            t[k] = np.log((vec[k] - lo) / (hi - vec[k]))
        return t

    def from_internal(self, t):
        """Map real-line coordinates back into the bounded box."""
        vec = np.empty(len(self.free))
        for k, name in enumerate(self.free):
            lo, hi = self.bounds[name]
            vec[k] = lo + (hi - lo) * expit(t[k])
        return vec


@dataclass(frozen=True)
class FitResult:
    """Outcome of a likelihood maximization.

    trace records every successful objective evaluation as (params, L);
    std_errors maps free parameter names to standard errors, or is None when
    the Hessian at the optimum was unusable.
    """

    theta_hat: KernelParams
    loglik_at_opt: float
    std_errors: dict
    trace: list
    converged: bool


def _loglik_fn(data, family, tree):
    use_reps = data.values.ndim == 2 and data.values.shape[1] > 1
    evaluate = loglik_reps if use_reps else loglik

    def f(params):
        h = build_hcov(KernelSpec(family, params), tree)
        return evaluate(h, data)

    return f


def fit_mle(data, family, tree, space, init, opts=None):
    """Maximize the log-likelihood over the free parameters of space.

    init must lie strictly inside the bounds and must itself evaluate
    cleanly; during the search, failed evaluations (indefinite or singular
    covariances) act as -inf likelihood barriers.  Exhausting the iteration
    budget returns the best point found with converged=False.
    """
    opts = dict(opts or {})
    maxiter = int(opts.pop("maxiter", 1000))
    if opts:
        raise ValueError(f"unknown options: {sorted(opts)}")

    f = _loglik_fn(data, family, tree)
    trace = []

    x0 = space.vector_from(init)
    L0 = f(space.params_from_vector(x0))
    trace.append((space.params_from_vector(x0), float(L0)))

    def neg(t):
        params = space.params_from_vector(space.from_internal(t))
        try:
            L = f(params)
        except (np.linalg.LinAlgError, OverflowError):
            return np.inf
        trace.append((params, float(L)))
        return -L

    def nm_opts(t, side):
        simplex = np.vstack([t, t + side * np.eye(t.shape[0])])
        return dict(xatol=1e-4, fatol=1e-6, maxiter=maxiter, maxfev=maxiter,
                    disp=False, initial_simplex=simplex)

    t0 = space.to_internal(x0)
    res = minimize(neg, t0, method="Nelder-Mead", options=nm_opts(t0, 0.5))
    res = minimize(neg, res.x, method="Nelder-Mead", options=nm_opts(res.x, 0.05))

    # the solver's reported vertex can miss an evaluation interrupted by the
    # budget, so the best traced point is the optimum
    theta_hat, best_L = max(trace, key=lambda entry: entry[1])
    try:
        se = std_errors(data, family, tree, space, theta_hat)
    except np.linalg.LinAlgError:
        se = None
    return FitResult(
        theta_hat=theta_hat,
        loglik_at_opt=float(best_L),
        std_errors=se,
        trace=trace,
        converged=bool(res.success),
    )


def fit_nu_sweep(data, family, tree, space, init, nus=(0.5, 1.0, 1.5, 2.0), opts=None):
    """Profile the smoothness over a discrete grid, fitting the rest per value.

    Returns (best_nu, results) where results maps each candidate nu to its
    FitResult and best_nu attains the largest optimized log-likelihood.
    """
    free = tuple(n for n in space.free if n != "nu")
    bounds = {n: space.bounds[n] for n in free}
    get = init.get if isinstance(init, dict) else lambda k: getattr(init, k)
    results = {}
    for nu in nus:
        fixed = {k: v for k, v in space.fixed.items() if k != "nu"}
        fixed["nu"] = float(nu)
        sp = ParamSpace(free=free, bounds=bounds, fixed=fixed)
        results[nu] = fit_mle(data, family, tree, sp, {n: get(n) for n in free}, opts=opts)
    best_nu = max(results, key=lambda nu: results[nu].loglik_at_opt)
    return best_nu, results


def fd_hessian(f, x, rel_step=1e-3):
    """Symmetric central-difference Hessian of f at x.

    Step sizes scale as rel_step * (1 + |x_j|) per coordinate; the result is
    symmetrized exactly.
    """
    x = np.asarray(x, dtype=float)
    p = x.shape[0]
    step = rel_step * (1.0 + np.abs(x))
    H = np.empty((p, p))
    f0 = f(x)

    def at(deltas):
        xx = x.copy()
        for j, s in deltas:
            xx[j] += s * step[j]
        return f(xx)

    for i in range(p):
        H[i, i] = (at([(i, 1)]) - 2.0 * f0 + at([(i, -1)])) / step[i] ** 2
        for j in range(i + 1, p):
            val = (
                at([(i, 1), (j, 1)]) - at([(i, 1), (j, -1)])
                - at([(i, -1), (j, 1)]) + at([(i, -1), (j, -1)])
            ) / (4.0 * step[i] * step[j])
            H[i, j] = val
            H[j, i] = val
    return 0.5 * (H + H.T)


def std_errors(data, family, tree, space, theta_hat):
    """Standard errors of the free parameters at theta_hat.

    The covariance of the estimates is the inverse of the negated
    finite-difference Hessian of the log-likelihood; a Hessian that is not
    negative definite raises instead of producing imaginary errors.
    """
    f = _loglik_fn(data, family, tree)
    xhat = np.array([getattr(theta_hat, name) for name in space.free])

    def L(vec):
        return f(space.params_from_vector(vec))

    H = fd_hessian(L, xhat)
    try:
        C = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "log-likelihood Hessian at the optimum is not negative definite; "
            "standard errors are undefined"
        )
    inv_c = np.linalg.inv(C)
    cov = inv_c.T @ inv_c
    return {name: float(np.sqrt(cov[k, k])) for k, name in enumerate(space.free)}


def loglik_slice(data, family, tree, center, axes, grids):
    """Log-likelihood on the outer product of two one-parameter grids.

    center fixes all parameters; axes names the two varied ones, grids their
    values.  Rows follow axes[0], columns axes[1].  Evaluations that fail
    are recorded as NaN rather than aborting the sweep.
    """
    if len(axes) != 2 or axes[0] == axes[1]:
        raise ValueError("axes must name two distinct parameters")
    for name in axes:
        if name not in PARAM_NAMES:
            raise ValueError(f"unknown parameter {name!r}")
    get = center.get if isinstance(center, dict) else lambda k: getattr(center, k)
    base = {name: get(name) for name in PARAM_NAMES}
    f = _loglik_fn(data, family, tree)
    g1 = np.asarray(grids[0], dtype=float).reshape(-1)
    g2 = np.asarray(grids[1], dtype=float).reshape(-1)
    out = np.full((g1.shape[0], g2.shape[0]), np.nan)
    for i, a in enumerate(g1):
        for j, b in enumerate(g2):
            d = dict(base)
            d[axes[0]] = float(a)
            d[axes[1]] = float(b)
            try:
                out[i, j] = f(KernelParams(**d))
            except (np.linalg.LinAlgError, OverflowError, ValueError):
                pass
    return out


def slice_csv(axes, grids, values):
    """Render a likelihood slice as CSV: one header line per axis carrying
    its name and grid, then the value matrix row-major."""
    values = np.asarray(values, dtype=float)
    lines = []
    for name, grid in zip(axes, grids):
        lines.append(",".join([name] + ["%.17g" % v for v in np.asarray(grid).reshape(-1)]))
    for row in values:
        lines.append(",".join("%.17g" % v for v in row))
    return "\n".join(lines) + "\n"
