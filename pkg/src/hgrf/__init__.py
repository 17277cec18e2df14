"""Gaussian random fields with hierarchical, recursively low-rank covariances.

The package is organized bottom-up:

* ``kernels``: base covariance families (Matern, squared-exponential, and
  Matern on the sphere through chordal distances).
* ``partition``: recursive partitioning trees over the sites, with landmark
  points per internal node.
* ``rlr``: recursively low-rank matrices and their O(n r^2) inversion,
  determinant, and generalized Cholesky algorithms.
* ``hcov``: the hierarchical covariance built from a kernel and a tree, its
  evaluation, and the out-of-sample path algorithms.
* ``grf``: sampling, kriging, and log-likelihoods of Gaussian fields.
* ``estimate``: maximum-likelihood fitting, standard errors, and
  likelihood slices.
* ``oracle``: slow dense reference implementations used for validation.
* ``cli``: the ``hgrf`` command-line tool.

Submodules are imported lazily so that the command-line tool can pin BLAS
thread counts through environment variables before numpy first loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "kernels": (
        "MATERN", "SQEXP", "SPHERE_MATERN", "FAMILIES",
        "KernelParams", "KernelSpec", "kernel_eval", "kernel_matrix",
        "chordal_distance",
    ),
    "partition": (
        "REGULAR_GRID", "RANDOM_UNIFORM", "RANDOM_SUBSAMPLE", "LANDMARK_STRATEGIES",
        "BoundingBox", "PartitionNode", "PartitionTree",
        "build_tree", "place_landmarks",
        "serialize_tree", "deserialize_tree", "save_tree", "load_tree",
    ),
    "rlr": (
        "RLRMatrix", "LogDet", "matvec", "invert", "logdet",
        "cholesky_like", "riccati_solve", "to_dense", "dump_rlr", "load_rlr",
    ),
    "hcov": (
        "HCov", "InnerProdCache", "QuadCache", "build_hcov", "kh_eval",
        "inner_preprocess", "oos_inner", "quad_preprocess", "oos_quad",
    ),
    "grf": (
        "FieldData", "KrigeResult", "KrigeWorkspace",
        "standard_normal", "sample", "krige_prepare", "krige",
        "loglik", "loglik_reps",
    ),
    "estimate": (
        "PARAM_NAMES", "ParamSpace", "FitResult",
        "fit_mle", "fit_nu_sweep", "std_errors", "fd_hessian",
        "loglik_slice", "slice_csv",
    ),
    "oracle": (
        "DENSE_LIMIT", "dense_kh", "dense_chol", "dense_lu", "dense_solve",
        "dense_logdet", "dense_krige", "dense_loglik",
    ),
}

_ATTR_TO_MODULE = {
    name: module for module, names in _EXPORTS.items() for name in names
}

__all__ = ["__version__", *_ATTR_TO_MODULE]


def __getattr__(name):
    module = _ATTR_TO_MODULE.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(importlib.import_module(f".{module}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(__all__))
