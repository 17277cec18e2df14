"""Spatial partitioning trees with landmark points.

A partitioning tree recursively splits a set of sites into a hierarchy of
axis-aligned boxes.  Each node covers a contiguous range of the (permuted)
site array; each nonleaf node additionally carries ``rank`` landmark points
placed inside its box.  The tree is the skeleton on which hierarchical
covariance approximations are built: landmarks of a node act as the basis
through which distant groups of sites communicate.

Splitting halves the sites at the median of the longest box dimension, so a
node with m sites gets children with ceil(m/2) and floor(m/2) sites.  A node
becomes a leaf when it holds fewer than 2 * rank sites.  With n sites total
the tree has height about log2(n / rank) and O(n / rank) nodes.

Nodes are numbered breadth-first from the root (id 0), so every parent id is
smaller than its children's ids.  Sweeping node ids in reverse order visits
children before parents (an upward pass); forward order gives a downward pass.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "REGULAR_GRID", "RANDOM_UNIFORM", "RANDOM_SUBSAMPLE", "LANDMARK_STRATEGIES",
    "BoundingBox", "PartitionNode", "PartitionTree",
    "build_tree", "place_landmarks",
    "serialize_tree", "deserialize_tree", "save_tree", "load_tree",
]

REGULAR_GRID = "regular-grid"
RANDOM_UNIFORM = "random-uniform"
RANDOM_SUBSAMPLE = "random-subsample"
LANDMARK_STRATEGIES = (REGULAR_GRID, RANDOM_UNIFORM, RANDOM_SUBSAMPLE)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box [lo, hi] in d dimensions."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have the same dimension")
        if np.any(hi < lo):
            raise ValueError("box has hi < lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def sides(self):
        return self.hi - self.lo

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def contains(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def distance_to(self, x):
        """Euclidean distance from x to the box (zero if inside)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        gap = np.maximum(np.maximum(self.lo - x, x - self.hi), 0.0)
        return float(np.sqrt(np.dot(gap, gap)))


@dataclass
class PartitionNode:
    """One node of a partitioning tree.

    Sites covered by the node occupy positions [begin, end) of the tree's
    permuted site array.  ``landmarks`` is an (r, d) array for nonleaf nodes
    and None for leaves.
    """

    id: int
    parent: Optional[int]
    begin: int
    end: int
    box: BoundingBox
    children: list = field(default_factory=list)
    landmarks: Optional[np.ndarray] = None

    @property
    def is_leaf(self):
        return not self.children

    @property
    def nsites(self):
        return self.end - self.begin


@dataclass
class PartitionTree:
    """A complete partitioning tree over a fixed set of sites.

    sites : (n, d) array in tree order (leaf-contiguous).
    perm  : permutation with sites[perm[i]] = original_sites[i]; that is,
            perm maps original positions to tree positions.
    """

    nodes: list
    sites: np.ndarray
    perm: np.ndarray
    rank: int

    @property
    def n(self):
        return self.sites.shape[0]

    @property
    def dim(self):
        return self.sites.shape[1]

    @property
    def root(self):
        return self.nodes[0]

    @property
    def leaves(self):
        return [nd for nd in self.nodes if nd.is_leaf]

    @property
    def height(self):
        """Number of edges on the longest root-to-leaf path."""
        depth = {0: 0}
        best = 0
        for nd in self.nodes[1:]:
            depth[nd.id] = depth[nd.parent] + 1
            best = max(best, depth[nd.id])
        return best

    def node_sites(self, node):
        return self.sites[node.begin:node.end]

    def to_tree_order(self, v):
        """Reorder per-site values from original order to tree order."""
        v = np.asarray(v)
        if v.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {v.shape[0]}")
        out = np.empty_like(v)
        out[self.perm] = v
        return out

    def from_tree_order(self, v):
        """Reorder per-site values from tree order back to original order."""
        v = np.asarray(v)
        if v.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {v.shape[0]}")
        return v[self.perm]

    def ancestors(self, node_id):
        """Ids on the path from node_id's parent up to the root."""
        out = []
        p = self.nodes[node_id].parent
        while p is not None:
            out.append(p)
            p = self.nodes[p].parent
        return out

    def lca(self, a, b):
        """Id of the lowest common ancestor of nodes a and b."""
        on_a = {a, *self.ancestors(a)}
        x = b
        while x not in on_a:
            x = self.nodes[x].parent
        return x

    def leaf_for_point(self, x):
        """Descend from the root to the leaf whose box is nearest x.

        At each level the child with the smallest box distance wins; ties go
        to the smaller node id.
        """
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.dim:
            raise ValueError(f"point dimension {x.shape[0]} != tree dimension {self.dim}")
        nd = self.root
        while not nd.is_leaf:
            dists = [self.nodes[c].box.distance_to(x) for c in nd.children]
            nd = self.nodes[nd.children[int(np.argmin(dists))]]
        return nd


def _tight_box(X):
    return BoundingBox(X.min(axis=0), X.max(axis=0))


def _grid_counts(sides, rank):
    """Per-dimension cell counts for a regular landmark grid.

    Greedily increments the count of the dimension whose current cell side is
    largest until the total cell count reaches `rank`, so cells stay as close
    to cubical as the box allows.
    """
    d = sides.shape[0]
    m = np.ones(d, dtype=int)
    while int(np.prod(m)) < rank:
        j = int(np.argmax(sides / m))
        m[j] += 1
    return m


def _regular_grid_landmarks(box, rank):
    sides = box.sides
    if np.any(sides <= 0):
        raise ValueError("regular-grid landmarks require a nondegenerate box")
    m = _grid_counts(sides, rank)
    axes = [box.lo[j] + (np.arange(m[j]) + 0.5) * sides[j] / m[j] for j in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    if pts.shape[0] > rank:
        # keep the `rank` cells nearest the box center, ties broken by
        # lexicographic coordinate order so the choice is deterministic
        d2 = np.sum((pts - box.center) ** 2, axis=1)
        order = np.lexsort(tuple(pts[:, j] for j in reversed(range(box.dim))) + (d2,))
        pts = pts[np.sort(order[:rank])]
    return pts


def _node_rng(seed, node_id):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(node_id,))
    return np.random.Generator(np.random.Philox(ss))


def _perturb_collisions(pts, box, avoid):
    """Nudge landmark points off any site they coincide with bitwise.

    A landmark exactly on a site would make the covariance between the two
    ambiguous (nugget or not), so collisions are shifted by a tiny fraction
    of the box side, staying inside the box.
    """
    taken = {row.tobytes() for row in np.ascontiguousarray(avoid, dtype=float)}
    sides = np.where(box.sides > 0, box.sides, 1.0)
    out = np.array(pts, dtype=float, copy=True)
    for i in range(out.shape[0]):
        scale = 1e-9
        for _ in range(60):
            key = np.ascontiguousarray(out[i]).tobytes()
            if key not in taken:
                break
            cand = out[i] + scale * sides
            mask = cand > box.hi
            cand[mask] = out[i][mask] - scale * sides[mask]
            cand = np.minimum(np.maximum(cand, box.lo), box.hi)
            out[i] = cand
            scale *= 2.0
        else:
            raise ValueError("could not separate a landmark from the sites")
        taken.add(np.ascontiguousarray(out[i]).tobytes())
    return out


def place_landmarks(box, rank, strategy, seed=0, sites_in_box=None, avoid=None, node_id=0):
    """Choose `rank` landmark points inside `box`.

    strategy:
      * regular-grid: centers of a near-cubical grid of cells, truncated to
        the `rank` cells nearest the box center if the grid overshoots.
      * random-uniform: uniform draws inside the box.
      * random-subsample: a uniform subsample of `sites_in_box` (required).

    `avoid` lists site coordinates the landmarks must not coincide with
    (defaults to `sites_in_box`); colliding points are perturbed slightly.
    Randomness is drawn from a per-node stream keyed on (seed, node_id), so
    landmark placement does not depend on tree traversal order.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if strategy not in LANDMARK_STRATEGIES:
        raise ValueError(
            f"unknown landmark strategy {strategy!r}; expected one of {LANDMARK_STRATEGIES}"
        )
    if strategy == REGULAR_GRID:
        pts = _regular_grid_landmarks(box, rank)
    elif strategy == RANDOM_UNIFORM:
        rng = _node_rng(seed, node_id)
        pts = box.lo + rng.random((rank, box.dim)) * box.sides
    else:
        if sites_in_box is None:
            raise ValueError("random-subsample requires sites_in_box")
        X = np.asarray(sites_in_box, dtype=float)
        if X.shape[0] < rank:
            raise ValueError(
                f"random-subsample needs at least rank={rank} sites, got {X.shape[0]}"
            )
        rng = _node_rng(seed, node_id)
        idx = rng.choice(X.shape[0], size=rank, replace=False)
        pts = X[np.sort(idx)]
    if avoid is None:
        avoid = sites_in_box
    if avoid is not None and len(avoid):
        pts = _perturb_collisions(pts, box, avoid)
    return np.ascontiguousarray(pts, dtype=float)


def build_tree(sites, rank, strategy=REGULAR_GRID, seed=0):
    """Build a partitioning tree over `sites` with `rank` landmarks per node.

    Sites are recursively median-split along the longest dimension of their
    tight bounding box until fewer than 2 * rank remain in a node.  Duplicate
    sites are rejected: the hierarchy needs distinct coordinates to tell the
    nugget apart from the smooth part of a covariance model.
    """
    X = np.asarray(sites, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("sites must be an (n, d) array")
    n, d = X.shape
    if rank < 2:
        raise ValueError(f"rank must be >= 2, got {rank}")
    if n < rank:
        raise ValueError(f"need at least rank={rank} sites, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("sites must be finite")
    seen = set()
    for row in X:
        key = np.ascontiguousarray(row).tobytes()
        if key in seen:
            raise ValueError("duplicate sites are not supported")
        seen.add(key)

    # work on an index permutation; sites are physically reordered at the end
    idx = np.arange(n)
    nodes = []
    # queue holds (parent_id, begin, end); ids are assigned breadth-first
    queue = [(None, 0, n)]
    while queue:
        nxt = []
        for parent, begin, end in queue:
            nid = len(nodes)
            seg = idx[begin:end]
            box = _tight_box(X[seg])
            nodes.append(PartitionNode(id=nid, parent=parent, begin=begin, end=end, box=box))
            if parent is not None:
                nodes[parent].children.append(nid)
            if end - begin < 2 * rank:
                continue
            sides = box.sides
            j = int(np.argmax(sides))
            # stable sort on (coordinate j, original index) fixes tie order
            order = np.lexsort((seg, X[seg, j]))
            idx[begin:end] = seg[order]
            mid = begin + (end - begin + 1) // 2
            nxt.append((nid, begin, mid))
            nxt.append((nid, mid, end))
        queue = nxt

    tree_sites = np.ascontiguousarray(X[idx])
    perm = np.empty(n, dtype=np.int64)
    perm[idx] = np.arange(n)
    tree = PartitionTree(nodes=nodes, sites=tree_sites, perm=perm, rank=rank)

    for nd in nodes:
        if nd.is_leaf:
            continue
        nd.landmarks = place_landmarks(
            nd.box, rank, strategy, seed=seed,
            sites_in_box=tree_sites[nd.begin:nd.end],
            avoid=tree_sites, node_id=nd.id,
        )
    return tree


def serialize_tree(tree):
    """Render a tree as text, exact to the last bit of every coordinate."""
    out = []
    out.append("hgrf-tree 1")
    out.append(
        f"n {tree.n} d {tree.dim} rank {tree.rank} "
        f"height {tree.height} nodes {len(tree.nodes)}"
    )
    out.append("perm " + " ".join(str(int(p)) for p in tree.perm))
    for row in tree.sites:
        out.append("site " + " ".join("%.17g" % v for v in row))
    for nd in tree.nodes:
        parent = -1 if nd.parent is None else nd.parent
        tail = "leaf" if nd.is_leaf else "children " + " ".join(str(c) for c in nd.children)
        out.append(f"node {nd.id} parent {parent} range {nd.begin} {nd.end} {tail}")
        out.append(
            "box "
            + " ".join("%.17g" % v for v in nd.box.lo)
            + " "
            + " ".join("%.17g" % v for v in nd.box.hi)
        )
        if not nd.is_leaf:
            for row in nd.landmarks:
                out.append("landmark " + " ".join("%.17g" % v for v in row))
    return "\n".join(out) + "\n"


def deserialize_tree(text):
    """Rebuild a tree from its text form."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "hgrf-tree 1":
        raise ValueError("not a partitioning tree file")
    hdr = lines[1].split()
    try:
        fields = {hdr[i]: int(hdr[i + 1]) for i in range(0, len(hdr), 2)}
        n, d = fields["n"], fields["d"]
        rank, nnodes = fields["rank"], fields["nodes"]
    except (KeyError, ValueError, IndexError):
        raise ValueError(f"malformed tree header: {lines[1]!r}")
    pos = 2
    parts = lines[pos].split()
    if parts[0] != "perm" or len(parts) != n + 1:
        raise ValueError("malformed perm line")
    perm = np.array([int(v) for v in parts[1:]], dtype=np.int64)
    pos += 1
    sites = np.empty((n, d), dtype=float)
    for i in range(n):
        parts = lines[pos + i].split()
        if parts[0] != "site" or len(parts) != d + 1:
            raise ValueError(f"malformed site line {i}")
        sites[i] = [float(v) for v in parts[1:]]
    pos += n
    nodes = []
    for _ in range(nnodes):
        parts = lines[pos].split()
        if parts[0] != "node":
            raise ValueError(f"expected node line, got {lines[pos]!r}")
        nid = int(parts[1])
        parent = int(parts[3])
        begin, end = int(parts[5]), int(parts[6])
        if parts[7] == "leaf":
            children = []
        elif parts[7] == "children":
            children = [int(v) for v in parts[8:]]
        else:
            raise ValueError(f"malformed node line {lines[pos]!r}")
        pos += 1
        parts = lines[pos].split()
        if parts[0] != "box" or len(parts) != 2 * d + 1:
            raise ValueError(f"malformed box line for node {nid}")
        vals = [float(v) for v in parts[1:]]
        box = BoundingBox(np.array(vals[:d]), np.array(vals[d:]))
        pos += 1
        landmarks = None
        if children:
            lm = np.empty((rank, d), dtype=float)
            for i in range(rank):
                parts = lines[pos + i].split()
                if parts[0] != "landmark" or len(parts) != d + 1:
                    raise ValueError(f"malformed landmark line for node {nid}")
                lm[i] = [float(v) for v in parts[1:]]
            landmarks = lm
            pos += rank
        nodes.append(PartitionNode(
            id=nid, parent=None if parent < 0 else parent,
            begin=begin, end=end, box=box, children=children, landmarks=landmarks,
        ))
    nodes.sort(key=lambda nd: nd.id)
    return PartitionTree(nodes=nodes, sites=sites, perm=perm, rank=rank)


def save_tree(tree, path):
    with open(path, "w") as fh:
        fh.write(serialize_tree(tree))


def load_tree(path):
    with open(path) as fh:
        return deserialize_tree(fh.read())
