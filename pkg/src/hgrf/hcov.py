"""Hierarchical covariance functions and their out-of-sample algorithms.

Given a base covariance k and a partitioning tree with landmark points, the
hierarchical covariance k_h agrees with k within each leaf subdomain and
replaces cross-subdomain covariances by a Nystrom-style product chain: the
covariance between x and a far-away y is routed through the landmark sets of
every ancestor of x's leaf up to the lowest common ancestor of the two
leaves, each landmark set contributing a Gram-inverse factor.  The resulting
covariance matrix K_h = k_h(X, X) over the tree's own sites is exactly a
symmetric recursively low-rank matrix, built here factor by factor.

The same chain structure makes the out-of-sample covariance vector
v = k_h(X, x) compressible: after an O(nr) (inner product) or O(nr^2)
(quadratic form) preprocessing sweep over the whole tree, w^T v and
v^T Atil v for a new site x cost only O(r^2 log(n/r)), walking the single
root-to-leaf path of x.  These two primitives are what make kriging on many
prediction sites cheap.

Landmark Gram matrices are factorized once at construction and shared by
every evaluation; all evaluation entry points are read-only after that, so
they may be called concurrently.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernels import kernel_eval, kernel_matrix
from .rlr import RLRMatrix

__all__ = [
    "HCov", "InnerProdCache", "QuadCache",
    "build_hcov", "kh_eval",
    "inner_preprocess", "oos_inner", "quad_preprocess", "oos_quad",
]


class HCov:
    """A hierarchical covariance: kernel, tree, K_h factors, cached Grams."""

    def __init__(self, spec, tree, Kh, gram_factors):
        self.spec = spec
        self.tree = tree
        self.Kh = Kh
        self.gram_factors = gram_factors
        idx = {}
        for lf in tree.leaves:
            block = tree.sites[lf.begin:lf.end]
            for row in range(block.shape[0]):
                idx[np.ascontiguousarray(block[row]).tobytes()] = (lf.id, row)
        self._site_index = idx

    def site_location(self, x):
        """(leaf id, row within leaf) if x is bitwise equal to a tree site."""
        return self._site_index.get(np.ascontiguousarray(x, dtype=float).tobytes())


def build_hcov(spec, tree):
    """Assemble K_h = k_h(X, X) as a symmetric RLR matrix.

    Leaf blocks are exact kernel matrices; Sigma factors are the landmark
    Grams; U and W are cross-covariances against the parent's landmarks with
    the parent Gram solved away (through its LU factorization, which is kept
    for later out-of-sample evaluations).
    """
    sites = tree.sites
    gram = {}
    Sigma = {}
    for nd in tree.nodes:
        if nd.is_leaf:
            continue
        Sig = kernel_matrix(spec, nd.landmarks, nd.landmarks)
        lu, piv = linalg.lu_factor(Sig, check_finite=False)
        if np.any(np.diag(lu) == 0.0):
            raise np.linalg.LinAlgError(
                f"landmark covariance matrix at node {nd.id} is singular; "
                "increase the nugget or use fewer landmarks"
            )
        Sigma[nd.id] = Sig
        gram[nd.id] = (lu, piv)

    Aii, U, W = {}, {}, {}
    for nd in tree.nodes:
        if nd.is_leaf:
            X = sites[nd.begin:nd.end]
            Aii[nd.id] = kernel_matrix(spec, X, X)
            if nd.parent is not None:
                cross = kernel_matrix(spec, tree.nodes[nd.parent].landmarks, X)
                U[nd.id] = linalg.lu_solve(gram[nd.parent], cross, check_finite=False).T
        elif nd.parent is not None:
            cross = kernel_matrix(spec, tree.nodes[nd.parent].landmarks, nd.landmarks)
            W[nd.id] = linalg.lu_solve(gram[nd.parent], cross, check_finite=False).T

    Kh = RLRMatrix(tree, True, Aii=Aii, U=U, Sigma=Sigma, W=W)
    return HCov(spec, tree, Kh, gram)


def _basis_vector(h, x, leaf, row, stop):
    """Chain weights of x against the landmarks of ancestor `stop`.

    Returns u with k_h contributions across `stop` equal to
    u^T Sigma_stop u_other.  For a tree site the stored U row is chained
    through the stored W factors; for any other point the only fresh solve
    is against the prefactorized Gram of the leaf's parent.
    """
    tree = h.tree
    if row is not None:
        u = h.Kh.U[leaf.id][row]
    else:
        p1 = leaf.parent
        kx = kernel_matrix(h.spec, tree.nodes[p1].landmarks, x[None, :])[:, 0]
        u = linalg.lu_solve(h.gram_factors[p1], kx, check_finite=False)
    for q in tree.ancestors(leaf.id):
        if q == stop:
            break
        u = h.Kh.W[q].T @ u
    return u


def kh_eval(h, x, y):
    """The hierarchical covariance k_h(x, y) between two points.

    Points in the same leaf get the base kernel exactly; otherwise the
    product chain through the lowest common ancestor of the two leaves is
    evaluated.  Points equal to tree sites reuse the stored factors, so the
    value agrees with the corresponding entry of the assembled K_h.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    tree = h.tree
    locx = h.site_location(x)
    locy = h.site_location(y)
    lx = tree.nodes[locx[0]] if locx else tree.leaf_for_point(x)
    ly = tree.nodes[locy[0]] if locy else tree.leaf_for_point(y)
    if lx.id == ly.id:
        return kernel_eval(h.spec, x, y)
    g = tree.lca(lx.id, ly.id)
    ux = _basis_vector(h, x, lx, locx[1] if locx else None, g)
    uy = _basis_vector(h, y, ly, locy[1] if locy else None, g)
    return float((h.Kh.Sigma[g] @ ux) @ uy)


@dataclass(frozen=True)
class InnerProdCache:
    """Point-independent state for w^T k_h(X, x): sibling-crossed c vectors
    plus the leaf segments of w."""

    hcov: HCov
    c: dict
    wleaf: dict


def inner_preprocess(h, w):
    """One upward sweep turning a weight vector into an InnerProdCache.

    w is length n in tree order.  The sweep contracts w against the U bases,
    pushes the sums up through the W factors, and crosses each node's total
    over to its siblings through the parent's Sigma.
    """
    w = np.asarray(w, dtype=float)
    tree = h.tree
    if w.shape != (tree.n,):
        raise ValueError(f"weight vector must have shape ({tree.n},), got {w.shape}")
    Kh = h.Kh
    wleaf = {lf.id: w[lf.begin:lf.end].copy() for lf in tree.leaves}

    e = {}
    for nd in reversed(tree.nodes):
        if nd.parent is None:
            continue
        if nd.is_leaf:
            e[nd.id] = Kh.U[nd.id].T @ w[nd.begin:nd.end]
        else:
            e[nd.id] = Kh.W[nd.id].T @ sum(e[j] for j in nd.children)

    c = {}
    for nd in tree.nodes:
        if nd.is_leaf:
            continue
        Sig = Kh.Sigma[nd.id]
        for i in nd.children:
            others = [e[j] for j in nd.children if j != i]
            c[i] = Sig.T @ sum(others) if others else np.zeros(tree.rank)
    return InnerProdCache(h, c, wleaf)


def _out_of_sample_point(h, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != h.tree.dim:
        raise ValueError(f"point dimension {x.shape[0]} != site dimension {h.tree.dim}")
    if h.site_location(x) is not None:
        raise ValueError(
            "point coincides with an observed site; "
            "out-of-sample evaluation is undefined there"
        )
    return x


def oos_inner(cache, x):
    """w^T k_h(X, x) for out-of-sample x, walking only x's root-to-leaf path."""
    h = cache.hcov
    x = _out_of_sample_point(h, x)
    tree = h.tree
    leaf = tree.leaf_for_point(x)
    kx = kernel_matrix(h.spec, tree.sites[leaf.begin:leaf.end], x[None, :])[:, 0]
    z = float(cache.wleaf[leaf.id] @ kx)
    if leaf.parent is None:
        return z
    p = leaf.parent
    klm = kernel_matrix(h.spec, tree.nodes[p].landmarks, x[None, :])[:, 0]
    d = linalg.lu_solve(h.gram_factors[p], klm, check_finite=False)
    z += float(cache.c[leaf.id] @ d)
    nid = p
    while tree.nodes[nid].parent is not None:
        d = h.Kh.W[nid].T @ d
        z += float(cache.c[nid] @ d)
        nid = tree.nodes[nid].parent
    return z


@dataclass(frozen=True)
class QuadCache:
    """Point-independent state for v^T Atil v with v = k_h(X, x): the
    Sigma-twisted basis couplings of Atil against K_h."""

    hcov: HCov
    atil: RLRMatrix
    ttheta: dict
    txi: dict


def quad_preprocess(h, atil):
    """Upward sweep coupling a symmetric RLR matrix Atil to the covariance.

    For each nonroot node the sweep produces Theta (Atil's basis against
    K_h's basis) and Xi (Atil compressed into K_h's basis), both twisted by
    the parent's Sigma into the forms consumed per prediction point.  The
    sibling coupling inside Xi uses Atil's own Sigma factor.
    """
    if atil.tree is not h.tree:
        raise ValueError("matrix tree does not match the covariance tree")
    if not atil.symmetric:
        raise ValueError("quadratic forms require the symmetric representation")
    tree = h.tree
    Kh = h.Kh
    theta, xi = {}, {}
    ttheta, txi = {}, {}
    for nd in reversed(tree.nodes):
        if nd.parent is None:
            continue
        i = nd.id
        if nd.is_leaf:
            th = atil.U[i].T @ Kh.U[i]
            x_ = Kh.U[i].T @ (atil.Aii[i] @ Kh.U[i])
        else:
            th = atil.W[i].T @ (sum(theta[j] for j in nd.children) @ Kh.W[i])
            inner = sum(xi[j] for j in nd.children)
            St = atil.Sigma[i]
            for a in nd.children:
                for b in nd.children:
                    if a != b:
                        inner = inner + theta[a].T @ (St @ theta[b])
            x_ = Kh.W[i].T @ (inner @ Kh.W[i])
        Sp = Kh.Sigma[nd.parent]
        theta[i] = th
        xi[i] = 0.5 * (x_ + x_.T)
        ttheta[i] = th @ Sp
        txi[i] = Sp.T @ (xi[i] @ Sp)
    return QuadCache(h, atil, ttheta, txi)


def oos_quad(cache, x):
    """v^T Atil v with v = k_h(X, x), for out-of-sample x.

    A second upward walk along x's path: the d vectors are the landmark
    chain weights of x, the c vectors accumulate Atil-basis contributions of
    every subtree hanging off the path, and each level adds the diagonal
    (Txi) and crossing (2 c_sib Sigma_til c_path) terms.  Sibling pairs
    hanging off the same path node contribute their own crossing terms, a
    case that only arises for trees with more than two children per node.
    """
    h = cache.hcov
    atil = cache.atil
    x = _out_of_sample_point(h, x)
    tree = h.tree
    leaf = tree.leaf_for_point(x)
    kx = kernel_matrix(h.spec, tree.sites[leaf.begin:leaf.end], x[None, :])[:, 0]
    z = float(kx @ (atil.Aii[leaf.id] @ kx))
    if leaf.parent is None:
        return z
    p = leaf.parent
    klm = kernel_matrix(h.spec, tree.nodes[p].landmarks, x[None, :])[:, 0]
    d = linalg.lu_solve(h.gram_factors[p], klm, check_finite=False)
    c = {leaf.id: atil.U[leaf.id].T @ kx}
    nid = leaf.id
    while True:
        pnode = tree.nodes[tree.nodes[nid].parent]
        sibs = [j for j in pnode.children if j != nid]
        St = atil.Sigma[pnode.id]
        sc = St @ c[nid]
        for s in sibs:
            c[s] = cache.ttheta[s] @ d
            z += float(d @ (cache.txi[s] @ d)) + 2.0 * float(c[s] @ sc)
        for a in range(len(sibs)):
            for b in range(a + 1, len(sibs)):
                z += 2.0 * float(c[sibs[a]] @ (St @ c[sibs[b]]))
        if pnode.parent is None:
            break
        c[pnode.id] = atil.W[pnode.id].T @ sum(c[j] for j in pnode.children)
        d = h.Kh.W[pnode.id].T @ d
        nid = pnode.id
    return z
