"""Command-line front end.

Subcommands cover the whole pipeline: partition sites into a tree, simulate
a field, krige prediction sites, evaluate or maximize the likelihood, slice
it for diagnostics, and benchmark the core operations.

Options come from an optional flat key=value config file with command-line
flags taking precedence; unknown config keys are rejected.  Exit codes: 0 on
success, 2 for configuration or input errors, 3 for numerical failures.

This module imports nothing heavy at import time on purpose: --threads must
pin the BLAS thread pools through environment variables before numpy is
first imported, which happens inside main() after argument parsing.
"""

import argparse
import json
import os
import sys

__all__ = ["ConfigError", "RunConfig", "main"]

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

_KNOWN_KEYS = {
    "sites", "data", "pred", "out",
    "rank", "strategy", "seed",
    "kernel", "alpha", "ell", "nu", "tau", "mean",
    "free", "maxiter", "nu_sweep", "nus",
    "alpha_min", "alpha_max", "ell_min", "ell_max",
    "nu_min", "nu_max", "tau_min", "tau_max",
    "axes", "grid1", "grid2",
    "ns", "ops", "reps",
    "sort_by_variance", "factor_cache",
}


class ConfigError(ValueError):
    """A configuration or input problem the user can fix."""


class RunConfig:
    """Flat string-valued settings merged from config file and flags."""

    def __init__(self, values):
        self.values = dict(values)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(f"missing required setting {key!r}")
        return self.values[key]

    def _typed(self, key, default, required, convert, what):
        if key not in self.values:
            if required:
                raise ConfigError(f"missing required setting {key!r}")
            return default
        try:
            return convert(self.values[key])
        except ValueError:
            raise ConfigError(f"setting {key!r} must be {what}, got {self.values[key]!r}")

    def get_float(self, key, default=None, required=False):
        return self._typed(key, default, required, float, "a number")

    def get_int(self, key, default=None, required=False):
        return self._typed(key, default, required, int, "an integer")

    def get_bool(self, key, default=False):
        def conv(s):
            t = s.strip().lower()
            if t in ("1", "true", "yes", "on"):
                return True
            if t in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        return self._typed(key, default, False, conv, "a boolean")


def read_config_file(path):
    """Parse a flat key=value file; '#' starts a comment, blanks ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
            values[key] = value.strip()
    return values


_FLAG_KEYS = (
    "sites", "data", "pred", "out", "rank", "strategy", "seed",
    "kernel", "alpha", "ell", "nu", "tau", "mean",
    "free", "maxiter", "axes", "grid1", "grid2", "ns", "ops", "reps",
    "factor_cache",
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="hgrf",
        description="Gaussian random fields with hierarchical covariance functions.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    descriptions = {
        "partition": "build a partitioning tree from sites and write it to a file",
        "simulate": "draw a field realization at the given sites",
        "krige": "predict at new sites from observed data",
        "loglik": "evaluate the log-likelihood of observed data",
        "mle": "maximize the likelihood over selected parameters",
        "slice": "tabulate the log-likelihood on a 2-d parameter grid",
        "bench": "time the core operations over a range of sizes",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--threads", type=int, help="pin BLAS/OpenMP thread count")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config setting (repeatable)")
        for key in _FLAG_KEYS:
            p.add_argument("--" + key.replace("_", "-"), dest=key)
        p.add_argument("--sort-by-variance", action="store_true", default=None,
                       dest="sort_by_variance",
                       help="krige only: order predictions by variance")
        p.add_argument("--nu-sweep", action="store_true", default=None, dest="nu_sweep",
                       help="mle only: profile nu over a discrete grid")
    return parser


def _merge_config(args):
    values = read_config_file(args.config) if args.config else {}
    for kv in args.set:
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        key, value = kv.split("=", 1)
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = value
    for key in _FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    for key in ("sort_by_variance", "nu_sweep"):
        if getattr(args, key, None):
            values[key] = "true"
    return RunConfig(values)


def _emit(cfg, text):
    out = cfg.get("out")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def read_sites_csv(path):
    """Sites plus optional value columns: header x1,..,xd[,value[,value2..]]."""
    import numpy as np

    with open(path, "r", encoding="utf-8") as fh:
        names = fh.readline().strip().split(",")
    d = 0
    while d < len(names) and names[d] == f"x{d + 1}":
        d += 1
    if d == 0:
        raise ConfigError(f"{path}: header must start with coordinate columns x1,..,xd")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] == 0:
        raise ConfigError(f"{path}: no data rows")
    if data.shape[1] != len(names):
        raise ConfigError(
            f"{path}: {data.shape[1]} columns but {len(names)} header fields"
        )
    X = data[:, :d]
    V = data[:, d:] if len(names) > d else None
    return X, V


def _format_rows(header, rows):
    lines = [header]
    for row in rows:
        lines.append(",".join("%.17g" % v for v in row))
    return "\n".join(lines) + "\n"


def _kernel_params(cfg, family):
    from .kernels import KernelParams

    nu = cfg.get_float("nu")
    if nu is None:
        if family != "sqexp":
            raise ConfigError("missing required setting 'nu'")
        nu = 0.5
    return KernelParams(
        alpha=cfg.get_float("alpha", required=True),
        ell=cfg.get_float("ell", required=True),
        nu=nu,
        tau=cfg.get_float("tau"),
    )


def _kernel_spec(cfg):
    from .kernels import FAMILIES, KernelSpec

    family = cfg.get("kernel", "matern")
    if family not in FAMILIES:
        raise ConfigError(f"unknown kernel family {family!r}; expected one of {FAMILIES}")
    return KernelSpec(family, _kernel_params(cfg, family))


def _build_tree(cfg, X):
    from .partition import LANDMARK_STRATEGIES, REGULAR_GRID, build_tree

    strategy = cfg.get("strategy", REGULAR_GRID)
    if strategy not in LANDMARK_STRATEGIES:
        raise ConfigError(
            f"unknown strategy {strategy!r}; expected one of {LANDMARK_STRATEGIES}"
        )
    return build_tree(
        X,
        cfg.get_int("rank", required=True),
        strategy=strategy,
        seed=cfg.get_int("seed", 0),
    )


def _parse_list(text, convert, what):
    try:
        return [convert(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of {what}, got {text!r}")


def _parse_grid(text):
    import numpy as np

    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid must be lo:hi:count or a comma list, got {text!r}")
        try:
            lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise ConfigError(f"grid must be lo:hi:count, got {text!r}")
        if count < 1:
            raise ConfigError("grid count must be at least 1")
        return np.linspace(lo, hi, count)
    return np.array(_parse_list(text, float, "numbers"))


def cmd_partition(cfg):
    from .partition import save_tree

    X, _ = read_sites_csv(cfg.require("sites"))
    tree = _build_tree(cfg, X)
    out = cfg.get("out")
    if not out:
        raise ConfigError("partition requires out=<path> for the tree file")
    save_tree(tree, out)
    sys.stdout.write(
        f"n={tree.n} nodes={len(tree.nodes)} leaves={len(tree.leaves)} "
        f"height={tree.height}\n"
    )


def cmd_simulate(cfg):
    from .grf import sample
    from .hcov import build_hcov

    X, _ = read_sites_csv(cfg.require("sites"))
    tree = _build_tree(cfg, X)
    h = build_hcov(_kernel_spec(cfg), tree)
    z = sample(h, cfg.get_int("seed", 0), mean=cfg.get_float("mean", 0.0))
    header = ",".join(f"x{j + 1}" for j in range(X.shape[1])) + ",value"
    rows = [tuple(X[i]) + (z[i],) for i in range(X.shape[0])]
    _emit(cfg, _format_rows(header, rows))


def _prepare_workspace(cfg, h, fd, tree):
    import os.path

    from .grf import krige_prepare
    from .rlr import dump_rlr, load_rlr

    cache = cfg.get("factor_cache")
    atil = None
    if cache and os.path.exists(cache):
        atil = load_rlr(cache, tree)
    work = krige_prepare(h, fd, atil=atil)
    if cache and atil is None:
        dump_rlr(work.atil, cache)
    return work


def cmd_krige(cfg):
    import numpy as np

    from .grf import FieldData, krige
    from .hcov import build_hcov

    X, V = read_sites_csv(cfg.require("data"))
    if V is None or V.shape[1] != 1:
        raise ConfigError("krige expects exactly one value column in the data file")
    X0, _ = read_sites_csv(cfg.require("pred"))
    if X0.shape[1] != X.shape[1]:
        raise ConfigError("prediction sites have a different dimension than the data")
    tree = _build_tree(cfg, X)
    h = build_hcov(_kernel_spec(cfg), tree)
    fd = FieldData(X, V[:, 0], mean=cfg.get_float("mean", 0.0))
    work = _prepare_workspace(cfg, h, fd, tree)
    results = [krige(h, fd, X0[i], work) for i in range(X0.shape[0])]
    order = range(X0.shape[0])
    if cfg.get_bool("sort_by_variance"):
        order = np.argsort([r.var0 for r in results], kind="stable")
    header = ",".join(f"x{j + 1}" for j in range(X0.shape[1])) + ",mu,var"
    rows = [tuple(X0[i]) + (results[i].mu0, results[i].var0) for i in order]
    _emit(cfg, _format_rows(header, rows))


def cmd_loglik(cfg):
    from .grf import FieldData, loglik, loglik_reps
    from .hcov import build_hcov

    X, V = read_sites_csv(cfg.require("data"))
    if V is None:
        raise ConfigError("loglik requires at least one value column in the data file")
    tree = _build_tree(cfg, X)
    h = build_hcov(_kernel_spec(cfg), tree)
    mean = cfg.get_float("mean", 0.0)
    if V.shape[1] == 1:
        L = loglik(h, FieldData(X, V[:, 0], mean=mean))
    else:
        L = loglik_reps(h, FieldData(X, V, mean=mean))
    _emit(cfg, "%.17g\n" % L)


def _fit_to_dict(fit):
    theta = fit.theta_hat
    return {
        "theta": {"alpha": theta.alpha, "ell": theta.ell, "nu": theta.nu, "tau": theta.tau},
        "loglik": fit.loglik_at_opt,
        "std_errors": fit.std_errors,
        "converged": fit.converged,
        "n_evals": len(fit.trace),
    }


def cmd_mle(cfg):
    from .estimate import PARAM_NAMES, ParamSpace, fit_mle, fit_nu_sweep
    from .grf import FieldData

    X, V = read_sites_csv(cfg.require("data"))
    if V is None:
        raise ConfigError("mle requires at least one value column in the data file")
    tree = _build_tree(cfg, X)
    family = cfg.get("kernel", "matern")
    mean = cfg.get_float("mean", 0.0)
    fd = FieldData(X, V[:, 0] if V.shape[1] == 1 else V, mean=mean)

    sweep = cfg.get_bool("nu_sweep")
    nus = cfg.get("nus")
    nus = tuple(_parse_list(nus, float, "numbers")) if nus else (0.5, 1.0, 1.5, 2.0)

    free = tuple(_parse_list(cfg.get("free", "alpha,ell,nu"), str.strip, "names"))
    bounds, init, fixed = {}, {}, {}
    for name in free:
        lo = cfg.get_float(f"{name}_min", required=True)
        hi = cfg.get_float(f"{name}_max", required=True)
        bounds[name] = (lo, hi)
        init[name] = cfg.get_float(name, required=True)
    for name in PARAM_NAMES:
        if name in free:
            continue
        v = cfg.get_float(name)
        if name == "nu" and v is None:
            if sweep:
                v = nus[0]  # placeholder; the sweep pins nu per candidate
            elif family == "sqexp":
                v = 0.5
        if v is not None:
            fixed[name] = v
        elif name != "tau":
            raise ConfigError(f"parameter {name!r} needs a value or must be listed in free=")
    space = ParamSpace(free=free, bounds=bounds, fixed=fixed)
    opts = {"maxiter": cfg.get_int("maxiter", 1000)}

    if sweep:
        best_nu, fits = fit_nu_sweep(fd, family, tree, space, init, nus=nus, opts=opts)
        payload = {
            "best_nu": best_nu,
            "fits": {"%g" % nu: _fit_to_dict(f) for nu, f in fits.items()},
        }
    else:
        payload = _fit_to_dict(fit_mle(fd, family, tree, space, init, opts=opts))
    _emit(cfg, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_slice(cfg):
    from .estimate import loglik_slice, slice_csv
    from .grf import FieldData

    X, V = read_sites_csv(cfg.require("data"))
    if V is None:
        raise ConfigError("slice requires at least one value column in the data file")
    tree = _build_tree(cfg, X)
    family = cfg.get("kernel", "matern")
    center = _kernel_params(cfg, family)
    axes = _parse_list(cfg.require("axes"), str.strip, "names")
    if len(axes) != 2:
        raise ConfigError("axes must name exactly two parameters, e.g. axes=alpha,ell")
    grids = (_parse_grid(cfg.require("grid1")), _parse_grid(cfg.require("grid2")))
    fd = FieldData(X, V[:, 0] if V.shape[1] == 1 else V, mean=cfg.get_float("mean", 0.0))
    values = loglik_slice(fd, family, tree, center, tuple(axes), grids)
    _emit(cfg, slice_csv(axes, grids, values))


def cmd_bench(cfg):
    import time

    import numpy as np

    from .grf import FieldData, krige, krige_prepare, loglik, sample
    from .hcov import build_hcov
    from .rlr import cholesky_like, invert

    ns = _parse_list(cfg.require("ns"), int, "integers")
    ops = _parse_list(cfg.get("ops", "build,invert,loglik,krige_site"), str.strip, "names")
    reps = cfg.get_int("reps", 5)
    seed = cfg.get_int("seed", 0)
    spec = _kernel_spec(cfg)
    known = {"build", "invert", "cholesky", "loglik", "krige_prep", "krige_site"}
    for op in ops:
        if op not in known:
            raise ConfigError(f"unknown bench op {op!r}; expected one of {sorted(known)}")

    lines = ["n,op,median_seconds"]
    for n in ns:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(n,))))
        X = rng.random((n, 2))
        tree = _build_tree(cfg, X)
        h = build_hcov(spec, tree)
        fd = FieldData(X, sample(h, seed), mean=0.0)
        nq = 64
        Xq = rng.random((nq, 2))

        def timed(fn):
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
            return float(np.median(times))

        for op in ops:
            if op == "build":
                t = timed(lambda: build_hcov(spec, tree))
            elif op == "invert":
                t = timed(lambda: invert(h.Kh))
            elif op == "cholesky":
                t = timed(lambda: cholesky_like(h.Kh))
            elif op == "loglik":
                t = timed(lambda: loglik(h, fd))
            elif op == "krige_prep":
                t = timed(lambda: krige_prepare(h, fd))
            else:
                work = krige_prepare(h, fd)
                t = timed(lambda: [krige(h, fd, Xq[i], work) for i in range(nq)]) / nq
            lines.append("%d,%s,%.6g" % (n, op, t))
    _emit(cfg, "\n".join(lines) + "\n")


_COMMANDS = {
    "partition": cmd_partition,
    "simulate": cmd_simulate,
    "krige": cmd_krige,
    "loglik": cmd_loglik,
    "mle": cmd_mle,
    "slice": cmd_slice,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    import numpy as np

    try:
        cfg = _merge_config(args)
        _COMMANDS[args.command](cfg)
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except np.linalg.LinAlgError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OverflowError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
