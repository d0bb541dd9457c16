"""Averaged-MFCC embeddings, PCA reduction and k-nearest-neighbour voting."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class AmfccVector:
    values: np.ndarray
    label: Optional[str] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("AMFCC values must be a finite 1-D vector")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray  # K x D, orthonormal rows
    explained_variance: np.ndarray


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-dimension z-scoring fitted on training vectors.

    Averaged delta coefficients are orders of magnitude smaller than the
    static cepstra; without rescaling they never influence a Euclidean vote.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, vectors: Sequence[AmfccVector]) -> "Standardizer":
        if not vectors:
            raise ValueError("cannot fit a standardizer on zero vectors")
        X = np.array([v.values for v in vectors])
        scale = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def __call__(self, v: AmfccVector) -> AmfccVector:
        return AmfccVector((v.values - self.mean) / self.scale, v.label)


def amfcc(features, label: Optional[str] = None) -> AmfccVector:
    """Column-wise mean of a T x D feature matrix."""
    y = np.asarray(features, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"features must be T x D with T >= 1, got shape {y.shape}")
    return AmfccVector(y.mean(axis=0), label)


def pca_fit(vectors: Sequence[AmfccVector], k: int) -> PcaTransform:
    if len(vectors) < 2:
        raise ValueError("PCA needs at least two vectors")
    X = np.array([v.values for v in vectors])
    d = X.shape[1]
    if not 1 <= k <= d:
        raise ValueError(f"k must be in 1..{d}, got {k}")
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, ddof=1).reshape(d, d)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, order].T
    # sign convention: largest-magnitude entry of each component is positive
    pivots = np.argmax(np.abs(components), axis=1)
    components *= np.sign(components[np.arange(k), pivots])[:, None]
    return PcaTransform(mean, components, np.clip(eigvals[order], 0.0, None))


def pca_project(t: PcaTransform, v) -> np.ndarray:
    values = v.values if isinstance(v, AmfccVector) else np.asarray(v, dtype=np.float64)
    if values.shape != t.mean.shape:
        raise ValueError(f"vector has dimension {values.shape}, PCA expects {t.mean.shape}")
    return t.components @ (values - t.mean)


def knn_classify(train: Sequence[AmfccVector], query, k: int = 1) -> tuple[str, dict[str, int]]:
    """Majority vote among the k nearest (Euclidean) training vectors.

    Distance ties at the k-th place go to the earlier training index; vote
    ties go to the smaller summed distance, then the lexicographically first label.
    """
    if not train:
        raise ValueError("k-NN needs a nonempty training set")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be in 1..{len(train)}, got {k}")
    q = query.values if isinstance(query, AmfccVector) else np.asarray(query, dtype=np.float64)
    X = np.array([v.values for v in train])
    if X.shape[1] != q.shape[0]:
        raise ValueError(f"query has dimension {q.shape[0]}, training vectors have {X.shape[1]}")
    dist = np.sqrt(np.sum((X - q) ** 2, axis=1))
    nearest = np.argsort(dist, kind="stable")[:k]
    votes = Counter(train[i].label for i in nearest)
    summed = {label: 0.0 for label in votes}
    for i in nearest:
        summed[train[i].label] += dist[i]
    best = min(votes, key=lambda label: (-votes[label], summed[label], label))
    return best, dict(votes)


def vectors_to_csv(vectors: Sequence[AmfccVector]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for v in vectors:
        writer.writerow([v.label or ""] + [repr(float(x)) for x in v.values])
    return buf.getvalue()


def vectors_from_csv(text: str) -> list[AmfccVector]:
    rows = csv.reader(io.StringIO(text))
    return [AmfccVector(np.array([float(x) for x in row[1:]]), row[0] or None) for row in rows if row]
