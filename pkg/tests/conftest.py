"""Shared independent references used by more than one test module.

The functions here re-derive hierarchical covariance values from the
covariance function alone, using fresh dense solves at every step.  They
deliberately share no code with hgrf.hcov beyond the base kernel, so
agreement between the two is evidence about the factored implementation.
"""

import numpy as np

from hgrf.grf import standard_normal
from hgrf.kernels import KernelParams, KernelSpec, kernel_eval, kernel_matrix
from hgrf.partition import BoundingBox, PartitionNode, PartitionTree


def write_sites_csv(path, X, V=None):
    """Write a sites (and optional values) table in the CLI's CSV dialect."""
    X = np.atleast_2d(X)
    header = ",".join(f"x{j + 1}" for j in range(X.shape[1]))
    rows = X
    if V is not None:
        V = V[:, None] if V.ndim == 1 else V
        header += "," + ",".join("value" + ("" if j == 0 else str(j + 1))
                                 for j in range(V.shape[1]))
        rows = np.column_stack([X, V])
    lines = [header] + [",".join("%.17g" % v for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def single_site_tree(x=0.5):
    """A hand-assembled one-site tree, below the builder's size minimum."""
    box = BoundingBox(lo=np.array([0.0]), hi=np.array([1.0]))
    node = PartitionNode(id=0, parent=None, begin=0, end=1, box=box)
    return PartitionTree(nodes=[node], sites=np.array([[x]]), perm=np.array([0]), rank=1)


def closed_loop_data(seed, truth=(0.0, 0.2, 2.5)):
    """Simulate the 40x50 grid field from the exact kernel and split it.

    The field is drawn on the full grid through a dense eigendecomposition
    of the exact Matern covariance (clipped at zero), then a seeded
    counter-based permutation keeps 1000 sites for fitting and holds out
    the other 1000 for prediction checks.  Returns ((X_fit, z_fit),
    (X_hold, z_hold)).
    """
    g1 = np.linspace(-0.8, 0.8, 40)
    g2 = np.linspace(-1.0, 1.0, 50)
    X = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1).reshape(-1, 2)
    alpha, ell, nu = truth
    spec = KernelSpec("matern", KernelParams(alpha=alpha, ell=ell, nu=nu))
    K = kernel_matrix(spec, X, X)
    w, V = np.linalg.eigh(K)
    G = V * np.sqrt(np.clip(w, 0.0, None))
    z = G @ standard_normal(X.shape[0], seed)
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed, spawn_key=(7,))))
    perm = rng.permutation(X.shape[0])
    keep, hold = perm[:1000], perm[1000:]
    return (X[keep], z[keep]), (X[hold], z[hold])


def psi_chain(spec, tree, x, leaf, target):
    """Landmark chain weights psi(L_target, x) by explicit dense solves.

    Walks from the parent of x's leaf up to ancestor `target`, at each step
    solving against the current landmark Gram and crossing to the next
    landmark set: k(L_q, L_p) k(L_p, L_p)^{-1} ... k(L_p1, x).
    """
    p = leaf.parent
    v = kernel_matrix(spec, tree.nodes[p].landmarks, x[None, :])[:, 0]
    while p != target:
        q = tree.nodes[p].parent
        Lp = tree.nodes[p].landmarks
        Lq = tree.nodes[q].landmarks
        v = kernel_matrix(spec, Lq, Lp) @ np.linalg.solve(kernel_matrix(spec, Lp, Lp), v)
        p = q
    return v


def telescoping_sum(spec, tree, x, y):
    """Sum of per-node Schur-complement contributions, which equals k_h(x, y).

    Each tree node i contributes only when both points fall in its subtree:
    a leaf contributes the base kernel minus the Nystrom part through its
    parent's landmarks, an interior node contributes the chain-weighted
    Schur complement of its parent's landmarks inside its own, and the root
    contributes the plain chain-weighted Gram.  Telescoping makes the sum
    collapse to the hierarchical covariance.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    lx = tree.leaf_for_point(x)
    ly = tree.leaf_for_point(y)
    path_x = [lx.id] + list(tree.ancestors(lx.id))
    path_y = set([ly.id] + list(tree.ancestors(ly.id)))
    total = 0.0
    for i in path_x:
        if i not in path_y:
            continue
        nd = tree.nodes[i]
        if nd.is_leaf:
            Lp = tree.nodes[nd.parent].landmarks
            G = kernel_matrix(spec, Lp, Lp)
            kx = kernel_matrix(spec, Lp, x[None, :])[:, 0]
            ky = kernel_matrix(spec, Lp, y[None, :])[:, 0]
            total += kernel_eval(spec, x, y) - float(kx @ np.linalg.solve(G, ky))
            continue
        L = nd.landmarks
        G = kernel_matrix(spec, L, L)
        px = np.linalg.solve(G, psi_chain(spec, tree, x, lx, i))
        py = np.linalg.solve(G, psi_chain(spec, tree, y, ly, i))
        if nd.parent is None:
            total += float(px @ (G @ py))
        else:
            Lp = tree.nodes[nd.parent].landmarks
            Gp = kernel_matrix(spec, Lp, Lp)
            C = kernel_matrix(spec, L, Lp)
            S = G - C @ np.linalg.solve(Gp, C.T)
            total += float(px @ (S @ py))
    return total
