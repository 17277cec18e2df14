"""Recursively low-rank matrices: products, inversion, determinant, factorization.

A recursively low-rank (RLR) matrix follows the block structure of a
partitioning tree: leaf diagonal blocks are dense, and the block between two
different leaves has rank at most r, with the low-rank bases nested so that a
parent's basis is expressed through its children's bases.  Concretely the
matrix is represented by factors

* A_ii (dense) and U_i, V_i (tall, r columns) for every leaf i,
* Sigma_p (r x r) for every nonleaf p,
* W_q, Z_q (r x r) for every nonleaf nonroot q,

where the block between descendants of distinct children of p is built from
U Sigma_p V^T with U, V expanded down the tree through the W, Z chains.  A
symmetric matrix stores V and Z as aliases of U and W.

Stored this way, an n x n matrix costs O(nr) memory; the operations here
cost O(nr) for a product, O(nr^2) for inversion and for the Cholesky-like
factorization A = G G^T (G is RLR again, not triangular), with the
determinant falling out of the inversion sweep for free.  Inversion and
factorization both run an upward pass producing per-node local factors and a
downward pass that telescopes parent corrections into each node, so only
O(r^2) state is attached to any node at any time.

All vectors are in tree (permuted) order; callers reorder at the boundary.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import linalg

__all__ = [
    "RLRMatrix", "LogDet",
    "matvec", "invert", "logdet", "cholesky_like", "riccati_solve",
    "to_dense", "dump_rlr", "load_rlr",
]


@dataclass(frozen=True)
class LogDet:
    """A determinant stored as log|det| and its sign (+1, -1, or 0)."""

    log_abs: float
    sign: int


def _sym(M):
    return 0.5 * (M + M.T)


class RLRMatrix:
    """A matrix in recursively low-rank form over a partitioning tree.

    Factors are dicts keyed by node id: Aii and U (and V when unsymmetric)
    at leaves, Sigma at nonleaf nodes, W (and Z) at nonleaf nonroot nodes.
    A root that is itself a leaf stores only Aii.  Instances are treated as
    immutable once built.
    """

    def __init__(self, tree, symmetric, Aii, U, Sigma, W, V=None, Z=None):
        self.tree = tree
        self.symmetric = bool(symmetric)
        self.Aii = Aii
        self.U = U
        self.Sigma = Sigma
        self.W = W
        if self.symmetric:
            if V is not None and V is not U:
                raise ValueError("symmetric matrix must alias V to U")
            if Z is not None and Z is not W:
                raise ValueError("symmetric matrix must alias Z to W")
            V, Z = U, W
        else:
            if V is None or Z is None:
                raise ValueError("unsymmetric matrix requires V and Z factors")
        self.V = V
        self.Z = Z
        self._validate()

    @property
    def n(self):
        return self.tree.n

    @property
    def rank(self):
        return self.tree.rank

    def _validate(self):
        r = self.rank
        for nd in self.tree.nodes:
            i = nd.id
            if nd.is_leaf:
                m = nd.nsites
                if self.Aii[i].shape != (m, m):
                    raise ValueError(f"A_{i} must be {m}x{m}, got {self.Aii[i].shape}")
                if nd.parent is not None:
                    for name, F in (("U", self.U), ("V", self.V)):
                        if F[i].shape != (m, r):
                            raise ValueError(f"{name}_{i} must be {m}x{r}, got {F[i].shape}")
            else:
                if self.Sigma[i].shape != (r, r):
                    raise ValueError(f"Sigma_{i} must be {r}x{r}")
                if nd.parent is not None:
                    for name, F in (("W", self.W), ("Z", self.Z)):
                        if F[i].shape != (r, r):
                            raise ValueError(f"{name}_{i} must be {r}x{r}")

    def matvec(self, b):
        return matvec(self, b)

    def to_dense(self):
        return to_dense(self)


def matvec(A, b):
    """Product A @ b for b of shape (n,) or (n, k), in tree order.

    Upward pass contracts b against the V bases (c vectors), the sibling
    exchange applies Sigma at each parent, and the downward pass pushes the
    accumulated d vectors through the W chains into the leaves.
    """
    b = np.asarray(b, dtype=float)
    tree = A.tree
    if b.shape[0] != tree.n:
        raise ValueError(f"vector length {b.shape[0]} does not match n={tree.n}")
    single = b.ndim == 1
    B = b[:, None] if single else b
    k = B.shape[1]

    c = {}
    for nd in reversed(tree.nodes):
        if nd.parent is None:
            continue
        if nd.is_leaf:
            c[nd.id] = A.V[nd.id].T @ B[nd.begin:nd.end]
        else:
            s = sum(c[j] for j in nd.children)
            c[nd.id] = A.Z[nd.id].T @ s

    d = {}
    for nd in tree.nodes:
        if nd.is_leaf:
            continue
        Sig = A.Sigma[nd.id]
        for i in nd.children:
            others = [c[j] for j in nd.children if j != i]
            d[i] = Sig @ sum(others) if others else np.zeros((tree.rank, k))
    for nd in tree.nodes:
        if nd.is_leaf or nd.parent is None:
            continue
        push = A.W[nd.id] @ d[nd.id]
        for j in nd.children:
            d[j] += push

    y = np.empty_like(B)
    for nd in tree.leaves:
        yl = A.Aii[nd.id] @ B[nd.begin:nd.end]
        if nd.parent is not None:
            yl += A.U[nd.id] @ d[nd.id]
        y[nd.begin:nd.end] = yl
    return y[:, 0] if single else y


def _lu_logdet(lu, piv):
    """(log|det|, sign) of a matrix from its LU factorization."""
    diag = np.diag(lu)
    if np.any(diag == 0.0):
        return -np.inf, 0
    swaps = int(np.count_nonzero(piv != np.arange(piv.shape[0])))
    sign = -1 if swaps % 2 else 1
    sign *= -1 if (np.count_nonzero(diag < 0) % 2) else 1
    return float(np.sum(np.log(np.abs(diag)))), sign


def invert(A):
    """Inverse and determinant of an RLR matrix, as (A_inverse, LogDet).

    The inverse has the same tree and rank.  The upward pass inverts
    deflated leaf blocks A_ii - U Sigma_p V^T and forms, at each nonleaf,
    the r x r core -(I + Lambda Xi)^{-1} Lambda through a rank-r use of the
    Woodbury identity; per-node determinants of the deflated leaf blocks and
    of I + Lambda Xi multiply into det(A).  The downward pass adds the
    telescoped parent correction to every leaf block and Sigma factor.
    """
    tree = A.tree
    sym = A.symmetric
    r = tree.rank
    eye_r = np.eye(r)

    At, Ut, Vt, St, Wt, Zt = {}, {}, {}, {}, {}, {}
    theta = {}
    log_abs = 0.0
    sign = 1
    for nd in reversed(tree.nodes):
        i = nd.id
        if nd.is_leaf:
            M = A.Aii[i]
            if nd.parent is not None:
                M = M - A.U[i] @ (A.Sigma[nd.parent] @ A.V[i].T)
            lu, piv = linalg.lu_factor(M, check_finite=False)
            la, sg = _lu_logdet(lu, piv)
            if sg == 0:
                raise np.linalg.LinAlgError(f"singular leaf block at node {i}")
            log_abs += la
            sign *= sg
            Minv = linalg.lu_solve((lu, piv), np.eye(M.shape[0]), check_finite=False)
            if sym:
                Minv = _sym(Minv)
            At[i] = Minv
            if nd.parent is not None:
                Ut[i] = Minv @ A.U[i]
                Vt[i] = Ut[i] if sym else Minv.T @ A.V[i]
                th = A.V[i].T @ Ut[i]
                theta[i] = _sym(th) if sym else th
        else:
            Xi = sum(theta[j] for j in nd.children)
            if sym:
                Xi = _sym(Xi)
            if nd.parent is None:
                Lam = A.Sigma[i]
            else:
                Lam = A.Sigma[i] - A.W[i] @ (A.Sigma[nd.parent] @ A.Z[i].T)
            lu, piv = linalg.lu_factor(eye_r + Lam @ Xi, check_finite=False)
            la, sg = _lu_logdet(lu, piv)
            if sg == 0:
                raise np.linalg.LinAlgError(f"singular low-rank update at node {i}")
            log_abs += la
            sign *= sg
            Sig = -linalg.lu_solve((lu, piv), Lam, check_finite=False)
            if sym:
                Sig = _sym(Sig)
            St[i] = Sig
            if nd.parent is not None:
                Wt[i] = (eye_r + Sig @ Xi) @ A.W[i]
                Zt[i] = Wt[i] if sym else (eye_r + Sig.T @ Xi.T) @ A.Z[i]
                th = A.Z[i].T @ (Xi @ Wt[i])
                theta[i] = _sym(th) if sym else th

    # parents first, so St[p] is already corrected when its children read it
    for nd in tree.nodes[1:]:
        i, p = nd.id, nd.parent
        if nd.is_leaf:
            At[i] = At[i] + Ut[i] @ (St[p] @ Vt[i].T)
            if sym:
                At[i] = _sym(At[i])
        else:
            St[i] = St[i] + Wt[i] @ (St[p] @ Zt[i].T)
            if sym:
                St[i] = _sym(St[i])

    out = RLRMatrix(
        tree, sym, Aii=At, U=Ut, Sigma=St, W=Wt,
        V=None if sym else Vt, Z=None if sym else Zt,
    )
    return out, LogDet(log_abs, sign)


def logdet(A):
    """Determinant of an RLR matrix; the inversion sweep with factors discarded."""
    return invert(A)[1]


def riccati_solve(Lam, Xi):
    """Solve Lambda = D + D^T + D Xi D^T for a symmetric D.

    Solvable exactly when all eigenvalues of I + Xi Lambda are positive.  Of
    the many symmetric solutions, this returns the branch that is continuous
    in Lambda at 0 (so Xi = 0 gives D = Lambda / 2): the invariant subspace
    of the Hamiltonian-like matrix [[I, Xi], [Lambda, -I]] for its positive
    eigenvalues.  The result is checked against the defining equation and
    the complementary eigenvalue ordering is tried as a fallback.
    """
    Lam = np.asarray(Lam, dtype=float)
    Xi = np.asarray(Xi, dtype=float)
    r = Lam.shape[0]
    if Lam.shape != (r, r) or Xi.shape != (r, r):
        raise ValueError("Lambda and Xi must be square matrices of equal size")
    if not np.any(Xi):
        return _sym(Lam) / 2.0
    eigs = np.linalg.eigvals(np.eye(r) + Xi @ Lam)
    if np.any(eigs.real <= 0.0):
        raise np.linalg.LinAlgError(
            "quadratic factorization equation unsolvable: "
            "an eigenvalue of I + Xi Lambda is not positive"
        )
    H = np.block([[np.eye(r), Xi], [Lam, -np.eye(r)]])
    tol = 1e-10 * (1.0 + np.linalg.norm(Lam))
    last = None
    for branch in ("rhp", "lhp"):
        T, Q, sdim = linalg.schur(H, output="real", sort=branch)
        if sdim != r:
            last = f"invariant subspace has dimension {sdim}, expected {r}"
            continue
        Q11 = Q[:r, :r]
        Q21 = Q[r:, :r]
        try:
            D = linalg.solve(Q11.T, Q21.T).T
        except np.linalg.LinAlgError:
            last = "singular subspace basis"
            continue
        D = _sym(D)
        resid = np.linalg.norm(D + D.T + D @ Xi @ D.T - Lam)
        if resid <= tol:
            return D
        last = f"residual {resid:.3e} exceeds tolerance {tol:.3e}"
    raise np.linalg.LinAlgError(f"quadratic factorization equation solve failed: {last}")


def cholesky_like(A):
    """Factor a symmetric positive definite RLR matrix as A = G G^T.

    G is RLR on the same tree but not symmetric and not triangular; it
    shares the U and W factors with A, while its leaf blocks start from
    dense Cholesky factors of the deflated leaf blocks and its core factors
    solve a small quadratic (Riccati) equation per nonleaf node.  Sampling
    then only needs matvec(G, standard normals).
    """
    if not A.symmetric:
        raise ValueError("cholesky_like requires the symmetric form")
    tree = A.tree
    r = tree.rank
    eye_r = np.eye(r)

    Gii, Vg, Omega, Zg = {}, {}, {}, {}
    theta = {}
    for nd in reversed(tree.nodes):
        i = nd.id
        if nd.is_leaf:
            B = A.Aii[i]
            if nd.parent is not None:
                B = B - A.U[i] @ (A.Sigma[nd.parent] @ A.U[i].T)
            try:
                C = linalg.cholesky(B, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                raise np.linalg.LinAlgError(
                    f"deflated leaf block at node {i} is not positive definite"
                )
            Gii[i] = C
            if nd.parent is not None:
                Vi = linalg.solve_triangular(C, A.U[i], lower=True, check_finite=False)
                Vg[i] = Vi
                theta[i] = _sym(Vi.T @ Vi)
        else:
            Xi = _sym(sum(theta[j] for j in nd.children))
            if nd.parent is None:
                Lam = A.Sigma[i]
            else:
                Lam = _sym(A.Sigma[i] - A.W[i] @ (A.Sigma[nd.parent] @ A.W[i].T))
            try:
                D = riccati_solve(Lam, Xi)
            except np.linalg.LinAlgError as e:
                raise np.linalg.LinAlgError(f"factorization failed at node {i}: {e}")
            Omega[i] = D
            if nd.parent is not None:
                Zi = linalg.solve(eye_r + D @ Xi, A.W[i])
                Zg[i] = Zi
                theta[i] = _sym(Zi.T @ (Xi @ Zi))

    # parents first, so Omega[p] is corrected before its children read it
    for nd in tree.nodes[1:]:
        i, p = nd.id, nd.parent
        if nd.is_leaf:
            Gii[i] = Gii[i] + A.U[i] @ (Omega[p] @ Vg[i].T)
        else:
            Omega[i] = Omega[i] + A.W[i] @ (Omega[p] @ Zg[i].T)

    return RLRMatrix(
        tree, False, Aii=Gii, U=dict(A.U), Sigma=Omega, W=dict(A.W), V=Vg, Z=Zg,
    )


def _lca_split(tree, x, y):
    """For distinct leaves x, y: (lca id, child of lca over x, child over y)."""
    ax = [x.id] + tree.ancestors(x.id)
    ay = set([y.id] + tree.ancestors(y.id))
    a = x.id
    for nid in ax:
        if nid in ay:
            g = nid
            break
        a = nid
    b = y.id
    p = tree.nodes[y.id].parent
    while p != g:
        b = p
        p = tree.nodes[p].parent
    return g, a, b


def to_dense(A):
    """Materialize the full dense matrix; guarded to n <= 4096.

    Off-diagonal blocks are rebuilt by expanding each leaf's basis up the
    tree through the W (and Z) chains and applying the Sigma factor of the
    lowest common ancestor.  For a symmetric matrix the lower triangle is
    mirrored from the upper so the output is symmetric to the bit.
    """
    tree = A.tree
    n = tree.n
    if n > 4096:
        raise ValueError(f"dense conversion limited to n <= 4096, got {n}")
    leaves = tree.leaves

    ufull, vfull = {}, {}
    for lf in leaves:
        if lf.parent is None:
            break
        ufull[(lf.id, lf.id)] = A.U[lf.id]
        vfull[(lf.id, lf.id)] = A.V[lf.id]
        prev = lf.id
        for a in tree.ancestors(lf.id):
            if tree.nodes[a].parent is None:
                break
            ufull[(lf.id, a)] = ufull[(lf.id, prev)] @ A.W[a]
            vfull[(lf.id, a)] = vfull[(lf.id, prev)] @ A.Z[a]
            prev = a

    D = np.zeros((n, n))
    for lf in leaves:
        D[lf.begin:lf.end, lf.begin:lf.end] = A.Aii[lf.id]
    for ix, x in enumerate(leaves):
        for y in leaves[ix + 1:]:
            g, a, b = _lca_split(tree, x, y)
            Sig = A.Sigma[g]
            blk = (ufull[(x.id, a)] @ Sig) @ vfull[(y.id, b)].T
            D[x.begin:x.end, y.begin:y.end] = blk
            if A.symmetric:
                D[y.begin:y.end, x.begin:x.end] = blk.T
            else:
                D[y.begin:y.end, x.begin:x.end] = (
                    (ufull[(y.id, b)] @ Sig) @ vfull[(x.id, a)].T
                )
    return D


_MAGIC = b"HGRFRLR1"
_HEADER = struct.Struct("<8sQQQQ")


def _node_blocks(A, nd):
    """Factor arrays stored for one node, in dump order."""
    out = []
    if nd.is_leaf:
        out.append(A.Aii[nd.id])
        if nd.parent is not None:
            out.append(A.U[nd.id])
            if not A.symmetric:
                out.append(A.V[nd.id])
    else:
        out.append(A.Sigma[nd.id])
        if nd.parent is not None:
            out.append(A.W[nd.id])
            if not A.symmetric:
                out.append(A.Z[nd.id])
    return out


def dump_rlr(A, path):
    """Write the factors to a binary file (little-endian float64 blocks)."""
    tree = A.tree
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, tree.n, tree.rank, len(tree.nodes),
                              1 if A.symmetric else 0))
        for nd in tree.nodes:
            for blk in _node_blocks(A, nd):
                fh.write(np.ascontiguousarray(blk, dtype="<f8").tobytes())


def load_rlr(path, tree):
    """Read factors dumped by dump_rlr back onto the given tree."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ValueError("truncated factor file")
        magic, n, r, nnodes, symflag = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise ValueError("not an RLR factor file")
        if (n, r, nnodes) != (tree.n, tree.rank, len(tree.nodes)):
            raise ValueError(
                f"factor file header ({n}, {r}, {nnodes}) does not match tree "
                f"({tree.n}, {tree.rank}, {len(tree.nodes)})"
            )
        sym = bool(symflag)

        def read(shape):
            count = int(np.prod(shape))
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError("truncated factor file")
            return np.frombuffer(buf, dtype="<f8").astype(float).reshape(shape)

        Aii, U, V, Sigma, W, Z = {}, {}, {}, {}, {}, {}
        for nd in tree.nodes:
            i = nd.id
            if nd.is_leaf:
                m = nd.nsites
                Aii[i] = read((m, m))
                if nd.parent is not None:
                    U[i] = read((m, r))
                    if not sym:
                        V[i] = read((m, r))
            else:
                Sigma[i] = read((r, r))
                if nd.parent is not None:
                    W[i] = read((r, r))
                    if not sym:
                        Z[i] = read((r, r))
        if fh.read(1):
            raise ValueError("trailing data in factor file")
    return RLRMatrix(
        tree, sym, Aii=Aii, U=U, Sigma=Sigma, W=W,
        V=None if sym else V, Z=None if sym else Z,
    )
