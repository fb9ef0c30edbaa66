"""Executable checks of the neighborhood-purity guarantee.

Given trained embeddings, these verifiers measure:

* the per-anchor optimal condition min_n D_an >= max_p D_ap + c_b*d_ak + eps,
* query purity: whether each non-outlier query's k nearest training
  points all share the class of its nearest anchor,
* the fixed-margin sufficiency condition m > 3 * max_a d_ak,

plus a PCA reduction for scatter exports. All distances here are
Euclidean (unsquared) so the triangle-inequality steps behind the purity
argument are sound.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .knn import build_index, query_knn, take_snapshot
from .mathops import as_sample_matrix, pairwise_sq_dists, sq_dists_rowwise


@dataclass(frozen=True)
class Violation:
    anchor: int
    residual: float     # RHS - min_n D_an; positive means the condition fails
    d_ak: float
    max_pos_dist: float
    min_neg_dist: float


@dataclass(frozen=True)
class OptimalConditionReport:
    violations: list[Violation]
    skipped_anchors: list[int]   # anchors whose class has < k+1 samples
    n_checked: int

    @property
    def worst_residual(self) -> float:
        return max((v.residual for v in self.violations), default=0.0)


@dataclass(frozen=True)
class PurityReport:
    """Outcome of a purity scan; pure + impure + outlier == n_queries."""

    n_queries: int
    pure_count: int
    impure_count: int
    outlier_count: int
    query_status: list[str]          # per query: "pure" | "impure" | "outlier"
    nearest_anchor: np.ndarray       # (n_queries,) anchor id per query
    violations: OptimalConditionReport | None = field(default=None, compare=False)

    @property
    def purity(self) -> float:
        """Pure fraction among non-outlier queries."""
        considered = self.n_queries - self.outlier_count
        return self.pure_count / considered if considered else 1.0


def check_optimal_condition(embeddings, labels, k: int, c_b: float, eps: float
                            ) -> OptimalConditionReport:
    """Per-anchor residuals of min_n D_an >= max_p D_ap + c_b*d_ak + eps.

    Anchors whose class holds fewer than k+1 samples are skipped and
    reported rather than failed.
    """
    x = as_sample_matrix(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if not (1 <= k <= n - 1):
        raise ValueError(f"k_exceeds_n: k={k}, n={n}")
    dist = np.sqrt(pairwise_sq_dists(x))
    np.fill_diagonal(dist, np.inf)
    d_ak = np.sort(dist, axis=1)[:, k - 1]

    violations = []
    skipped = []
    n_checked = 0
    for a in range(n):
        same = labels == labels[a]
        if int(np.sum(same)) < k + 1:
            skipped.append(a)
            continue
        n_checked += 1
        row = dist[a]
        max_pos = float(np.max(row[same & np.isfinite(row)]))
        min_neg = float(np.min(row[~same]))
        rhs = max_pos + c_b * d_ak[a] + eps
        if min_neg < rhs:
            violations.append(Violation(anchor=a, residual=rhs - min_neg,
                                        d_ak=float(d_ak[a]),
                                        max_pos_dist=max_pos, min_neg_dist=min_neg))
    return OptimalConditionReport(violations=violations, skipped_anchors=skipped,
                                  n_checked=n_checked)


def purity_check(train_embeddings, train_labels, query_embeddings, k: int
                 ) -> PurityReport:
    """Classify each query as outlier, pure, or impure.

    A query is an outlier when it lies farther from its nearest anchor
    than that anchor's kth-neighbor radius; otherwise it is pure iff its
    k nearest training points all carry the nearest anchor's label.
    """
    x = as_sample_matrix(train_embeddings)
    q = as_sample_matrix(query_embeddings)
    labels = np.asarray(train_labels, dtype=np.int64)
    index = build_index(x, labels, metric="euclidean")
    snapshot = take_snapshot(index, k)

    status: list[str] = []
    anchors = np.empty(q.shape[0], dtype=np.int64)
    pure = impure = outlier = 0
    for i in range(q.shape[0]):
        d = np.sqrt(sq_dists_rowwise(x, q[i]))
        a = int(np.argmin(d))            # ties already resolved by first index
        anchors[i] = a
        if d[a] > snapshot.d_ak[a]:
            status.append("outlier")
            outlier += 1
            continue
        neighbors = query_knn(index, q[i], k)
        if all(labels[j] == labels[a] for j, _ in neighbors):
            status.append("pure")
            pure += 1
        else:
            status.append("impure")
            impure += 1
    return PurityReport(n_queries=q.shape[0], pure_count=pure, impure_count=impure,
                        outlier_count=outlier, query_status=status, nearest_anchor=anchors)


def corollary_margin_check(embeddings, labels, k: int, m: float
                           ) -> tuple[bool, float]:
    """Whether a fixed margin m clears 3 * max_a d_ak.

    Together with every fixed-margin hinge being inactive, a sufficient
    margin implies full neighborhood purity for non-outlier queries.
    Returns (sufficient, max_a d_ak).
    """
    x = as_sample_matrix(embeddings)
    index = build_index(x, np.asarray(labels, dtype=np.int64), metric="euclidean")
    snapshot = take_snapshot(index, k)
    max_d_ak = snapshot.max_d_ak()
    return m > 3.0 * max_d_ak, max_d_ak


def pca_reduce(vectors, out_dim: int):
    """Project onto the top principal components of the covariance.

    Returns (projected, components, explained_variance) with eigenvalues
    descending. Sign convention: each component's largest-magnitude entry
    is positive.
    """
    x = as_sample_matrix(vectors)
    n, d = x.shape
    if not (1 <= out_dim <= min(d, n)):
        raise ValueError(f"bad_out_dim: {out_dim} for {n}x{d} data")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1][:out_dim]
    components = eigvecs[:, order].T
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    explained = np.maximum(eigvals[order], 0.0)
    return centered @ components.T, components, explained


def write_scatter_csv(path, xy: np.ndarray, labels, status=None, ids=None) -> None:
    """CSV export (query_id, x, y, label, status) for external plotting."""
    xy = np.asarray(xy, dtype=np.float64)
    labels = np.asarray(labels)
    n = xy.shape[0]
    if ids is None:
        ids = range(n)
    if status is None:
        status = [""] * n
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "x", "y", "label", "status"])
        for i, (qid, row, lab, st) in enumerate(zip(ids, xy, labels, status)):
            w.writerow([qid, repr(float(row[0])), repr(float(row[1])), int(lab), st])


def write_violations_csv(path, report: OptimalConditionReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["anchor", "residual", "d_ak", "max_pos_dist", "min_neg_dist"])
        for v in report.violations:
            w.writerow([v.anchor, repr(v.residual), repr(v.d_ak),
                        repr(v.max_pos_dist), repr(v.min_neg_dist)])
