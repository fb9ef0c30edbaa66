"""Triplet construction strategies.

* ``sample_uniform``: positive uniform over the anchor's class, negative
  uniform over the rest.
* ``sample_local``: negative drawn inside the anchor's snapshot
  neighborhood, positive outside it, falling back to uniform when either
  local candidate set is empty so every anchor stays trainable.
* ``sample_hard``: within-batch hardest positive (largest squared
  distance) and hardest negative (smallest), ties to the lower index.

All sampling is driven by a caller-owned numpy Generator; identical
inputs and generator state yield identical triplets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .knn import NeighborhoodSnapshot


@dataclass(frozen=True)
class Triplet:
    """Index triple into the current training set: same-class positive,
    different-class negative, p != a."""

    a: int
    p: int
    n: int


def _positives(labels: np.ndarray, anchor: int) -> np.ndarray:
    pos = np.flatnonzero(labels == labels[anchor])
    return pos[pos != anchor]


def _choice(rng: np.random.Generator, candidates: np.ndarray) -> int:
    return int(candidates[rng.integers(candidates.size)])


def sample_uniform(labels, anchor: int, rng: np.random.Generator) -> Triplet:
    """Uniform positive/negative draw for one anchor."""
    labels = np.asarray(labels)
    pos = _positives(labels, anchor)
    if pos.size == 0:
        raise ValueError(f"no_positive: class of anchor {anchor} has a single sample")
    neg = np.flatnonzero(labels != labels[anchor])
    if neg.size == 0:
        raise ValueError("no_negative: dataset has a single class")
    return Triplet(a=anchor, p=_choice(rng, pos), n=_choice(rng, neg))


def sample_local(
    snapshot: NeighborhoodSnapshot,
    labels,
    anchor: int,
    rng: np.random.Generator,
) -> Triplet:
    """Negative from inside the anchor's neighborhood, positive from outside.

    Empty local candidate sets fall back to the uniform pools, keeping the
    draw order fixed (negative first, then positive) for determinism.
    """
    labels = np.asarray(labels)
    pos = _positives(labels, anchor)
    if pos.size == 0:
        raise ValueError(f"no_positive: class of anchor {anchor} has a single sample")
    neg = np.flatnonzero(labels != labels[anchor])
    if neg.size == 0:
        raise ValueError("no_negative: dataset has a single class")

    hood = snapshot.neighbor_ids[anchor]
    local_neg = hood[labels[hood] != labels[anchor]]
    n = _choice(rng, local_neg) if local_neg.size else _choice(rng, neg)

    nonlocal_pos = pos[~np.isin(pos, hood)]
    p = _choice(rng, nonlocal_pos) if nonlocal_pos.size else _choice(rng, pos)
    return Triplet(a=anchor, p=p, n=n)


def sample_hard(embeddings, labels, anchor: int) -> Triplet:
    """Hardest in-batch positive and negative for a batch-row anchor."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    d = embeddings - embeddings[anchor]
    sq = np.sum(d * d, axis=1)

    pos_mask = (labels == labels[anchor])
    pos_mask[anchor] = False
    if not np.any(pos_mask):
        raise ValueError(f"no_positive: batch holds no same-class sample for row {anchor}")
    neg_mask = labels != labels[anchor]
    if not np.any(neg_mask):
        raise ValueError(f"no_negative: batch holds no different-class sample for row {anchor}")

    # np.argmax/argmin return the first (lowest-index) extremum
    p = int(np.argmax(np.where(pos_mask, sq, -np.inf)))
    n = int(np.argmin(np.where(neg_mask, sq, np.inf)))
    return Triplet(a=anchor, p=p, n=n)
