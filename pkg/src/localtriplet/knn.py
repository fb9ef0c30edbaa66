"""Exact nearest-neighbor search, KNN classification, and the per-epoch
neighborhood snapshot used by margin computation and local mining.

All queries are exact: a kd-tree is used for dim <= 20 and a brute-force
scan otherwise, and both return the same (index, distance) lists as an
exhaustive search with ties broken by ascending point index.

Neighborhood snapshots always measure Euclidean (unsquared) distance so
that triangle-inequality reasoning about neighborhood radii is sound;
orderings are identical under both metrics.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .mathops import (
    as_sample_matrix,
    pairwise_sq_dists,
    pairwise_sq_dists_gram,
    sq_dists_rowwise,
)

KDTREE_MAX_DIM = 20
# Beyond this size the snapshot switches to Gram-matrix distances; the
# exact-equality contract for queries is stated for n <= 2000.
EXACT_SNAPSHOT_MAX_N = 2048


def choose_k(n: int) -> int:
    """Neighbor count ceil(sqrt(n)), computed in exact integer arithmetic."""
    if n < 1:
        raise ValueError(f"bad_n: {n}")
    return math.isqrt(n - 1) + 1


class _KDNode:
    __slots__ = ("idx", "axis", "left", "right")

    def __init__(self, idx: int, axis: int, left=None, right=None):
        self.idx = idx
        self.axis = axis
        self.left = left
        self.right = right


def _build_kdtree(points: np.ndarray, ids: np.ndarray, depth: int = 0):
    if ids.size == 0:
        return None
    axis = depth % points.shape[1]
    coords = points[ids, axis]
    # sort by (coordinate, id) so the median choice is deterministic
    order = np.lexsort((ids, coords))
    ids = ids[order]
    mid = ids.size // 2
    return _KDNode(
        int(ids[mid]),
        axis,
        _build_kdtree(points, ids[:mid], depth + 1),
        _build_kdtree(points, ids[mid + 1:], depth + 1),
    )


@dataclass(frozen=True)
class NeighborIndex:
    """Immutable search index over an embedded, labeled point set."""

    points: np.ndarray          # (n, dim) float64
    labels: np.ndarray          # (n,) int64
    metric: str                 # "euclidean" | "sq_euclidean"
    _tree: object = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def build_index(points, labels, metric: str = "euclidean") -> NeighborIndex:
    """Build an exact index; kd-tree for dim <= 20, brute force above."""
    if metric not in ("euclidean", "sq_euclidean"):
        raise ValueError(f"bad_metric: {metric}")
    pts = as_sample_matrix(points).copy()
    lab = np.asarray(labels, dtype=np.int64).copy()
    if lab.ndim != 1 or lab.shape[0] != pts.shape[0]:
        raise ValueError(f"label_mismatch: {pts.shape[0]} points vs {lab.shape} labels")
    pts.setflags(write=False)
    lab.setflags(write=False)
    tree = None
    if pts.shape[1] <= KDTREE_MAX_DIM:
        tree = _build_kdtree(pts, np.arange(pts.shape[0]))
    return NeighborIndex(points=pts, labels=lab, metric=metric, _tree=tree)


def _kd_query(index: NeighborIndex, q: np.ndarray, k: int, exclude: int | None):
    # max-heap of the k best (dist, idx) in the index metric, stored negated
    # so the lexicographically worst candidate sits at heap[0]; (dist, idx)
    # ordering implements the ascending-index tie break. Ranking must happen
    # in metric space: sqrt can fuse distances that differ by an ulp in
    # squared space into exact ties.
    heap: list[tuple[float, int]] = []
    euclid = index.metric == "euclidean"

    def visit(node):
        if node is None:
            return
        if node.idx != exclude:
            d = q - index.points[node.idx]
            dist = float(np.sum(d * d))
            if euclid:
                dist = math.sqrt(dist)
            key = (-dist, -node.idx)
            if len(heap) < k:
                heapq.heappush(heap, key)
            elif key > heap[0]:
                heapq.heapreplace(heap, key)
        delta = float(q[node.axis] - index.points[node.idx, node.axis])
        near, far = (node.left, node.right) if delta < 0 else (node.right, node.left)
        visit(near)
        # the far side can still hold an equal-distance lower-index point;
        # one ulp of slack absorbs sqrt rounding at the boundary
        if len(heap) < k:
            visit(far)
        else:
            worst = -heap[0][0]
            bound = abs(delta) if euclid else delta * delta
            if bound <= math.nextafter(worst, math.inf):
                visit(far)

    visit(index._tree)
    return sorted((-nd, -ni) for nd, ni in heap)


def query_knn(
    index: NeighborIndex, q, k: int, exclude: int | None = None
) -> list[tuple[int, float]]:
    """The k nearest points to q: (point id, distance) ascending, ties by id."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise ValueError(f"dim_mismatch: query {q.shape} vs index dim {index.dim}")
    avail = index.n - (1 if exclude is not None else 0)
    if k < 1 or k > avail:
        raise ValueError(f"k_exceeds_n: k={k}, available={avail}")
    if index._tree is not None:
        pairs = _kd_query(index, q, k, exclude)
    else:
        d = sq_dists_rowwise(index.points, q)
        if index.metric == "euclidean":
            d = np.sqrt(d)
        if exclude is not None:
            d[exclude] = np.inf
        order = np.argsort(d, kind="stable")[:k]
        pairs = [(float(d[i]), int(i)) for i in order]
    return [(i, dist) for dist, i in pairs]


def knn_classify(index: NeighborIndex, q, k: int):
    """Predict by neighbor vote.

    Returns (predicted class, posterior map). Posteriors are exact
    fractions count/k so they always sum to 1; argmax ties go to the
    class of the nearest neighbor among the tied classes.
    """
    neighbors = query_knn(index, q, k)
    counts: dict[int, int] = {}
    for i, _ in neighbors:
        c = int(index.labels[i])
        counts[c] = counts.get(c, 0) + 1
    posterior = {c: Fraction(m, k) for c, m in counts.items()}
    best = max(counts.values())
    tied = {c for c, m in counts.items() if m == best}
    if len(tied) == 1:
        return tied.pop(), posterior
    for i, _ in neighbors:
        c = int(index.labels[i])
        if c in tied:
            return c, posterior
    raise AssertionError("unreachable: tied class must appear among neighbors")


@dataclass(frozen=True)
class NeighborhoodSnapshot:
    """Per-anchor neighborhood geometry frozen at the start of an epoch.

    d_ak[a] is the Euclidean distance from anchor a to its kth nearest
    neighbor of any class (self excluded); neighbor_ids[a] are those k
    indices; d_ak_pos[a] is the distance to the kth nearest same-class
    neighbor, falling back to the farthest available same-class peer when
    the class holds fewer than k+1 samples. Anchors whose class has no
    other sample get has_positive False and NaN d_ak_pos.
    """

    epoch: int
    k: int
    d_ak: np.ndarray          # (n,) float64, Euclidean
    d_ak_pos: np.ndarray      # (n,) float64, Euclidean; NaN if no positive
    neighbor_ids: np.ndarray  # (n, k) int64, ascending (distance, id)
    has_positive: np.ndarray  # (n,) bool

    @property
    def n(self) -> int:
        return self.d_ak.shape[0]

    def mean_d_ak(self) -> float:
        return float(np.mean(self.d_ak))

    def max_d_ak(self) -> float:
        return float(np.max(self.d_ak))

    def mean_d_ak_pos(self) -> float:
        usable = self.d_ak_pos[self.has_positive]
        return float(np.mean(usable)) if usable.size else float("nan")


def take_snapshot(index: NeighborIndex, k: int, epoch: int = 0) -> NeighborhoodSnapshot:
    """Freeze every anchor's neighborhood at the start of an epoch."""
    n = index.n
    if k < 1 or k > n - 1:
        raise ValueError(f"k_exceeds_n: k={k}, n={n} (self excluded)")
    pts = index.points
    if n <= EXACT_SNAPSHOT_MAX_N:
        sq = pairwise_sq_dists(pts)
    else:
        sq = pairwise_sq_dists_gram(pts)
    dist = np.sqrt(sq, out=sq)
    np.fill_diagonal(dist, np.inf)

    # stable argsort == ascending (distance, index) tie break
    neighbor_ids = np.empty((n, k), dtype=np.int64)
    d_ak = np.empty(n, dtype=np.float64)
    chunk = max(1, (1 << 22) // max(n, 1))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        order = np.argsort(dist[lo:hi], axis=1, kind="stable")[:, :k]
        neighbor_ids[lo:hi] = order
        d_ak[lo:hi] = np.take_along_axis(dist[lo:hi], order[:, -1:], axis=1)[:, 0]

    d_ak_pos = np.full(n, np.nan, dtype=np.float64)
    has_positive = np.zeros(n, dtype=bool)
    labels = index.labels
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        m = members.size
        if m < 2:
            continue
        within = np.sort(dist[np.ix_(members, members)], axis=1)
        # column 0 is the +inf-free nearest peer (diagonal is +inf and
        # sorts last); the kth same-class neighbor or the farthest peer
        col = min(k, m - 1) - 1
        d_ak_pos[members] = within[:, col]
        has_positive[members] = True

    for arr in (d_ak, d_ak_pos, neighbor_ids, has_positive):
        arr.setflags(write=False)
    return NeighborhoodSnapshot(
        epoch=epoch,
        k=k,
        d_ak=d_ak,
        d_ak_pos=d_ak_pos,
        neighbor_ids=neighbor_ids,
        has_positive=has_positive,
    )


def is_outlier(snapshot: NeighborhoodSnapshot, index: NeighborIndex, q) -> bool:
    """True iff q lies beyond the neighborhood radius of its nearest anchor."""
    q = np.asarray(q, dtype=np.float64)
    (a, _), = query_knn(index, q, 1)
    d_aq = math.sqrt(float(np.sum((index.points[a] - q) ** 2)))
    return d_aq > float(snapshot.d_ak[a])
