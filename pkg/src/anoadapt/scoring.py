"""Anomaly scoring: center distance, exact kNN, K-means, whitening, and the
per-checkpoint max-normalized-score rule used for sample-wise early stopping.

All distances are Euclidean, computed in float64 through the stable
``|a-b|^2 = |a|^2 + |b|^2 - 2 a.b`` form with negative clamping before the
square root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import Checkpoint, forward
from .errors import DegenerateNormalizerError, ValidationError
from .feature_store import FeatureMatrix, split_train_val

DEFAULT_K = 2
DEFAULT_MEANS = 10


def _rows(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values()
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected an n x d matrix, got shape {a.shape}")
    return a


@dataclass
class Gallery:
    """Adapted training features queries are scored against."""

    features: np.ndarray
    sq_norms: np.ndarray | None = None

    def __post_init__(self):
        self.features = _rows(self.features)
        if not np.isfinite(self.features).all():
            raise ValidationError("gallery features must be finite")
        if self.sq_norms is None:
            self.sq_norms = np.einsum("ij,ij->i", self.features, self.features)

    @property
    def n(self) -> int:
        return self.features.shape[0]


def pairwise_distances(g: Gallery, q: np.ndarray) -> np.ndarray:
    """m x n matrix of Euclidean distances from queries to gallery rows."""
    q_sq = np.einsum("ij,ij->i", q, q)
    d2 = q_sq[:, None] + g.sq_norms[None, :] - 2.0 * (q @ g.features.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def center_distance_score(c: np.ndarray, q) -> np.ndarray:
    """Per-row Euclidean distance to a fixed center."""
    qv = _rows(q)
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (qv.shape[1],):
        raise ValueError(f"center dimension {c.shape} != query dimension {qv.shape[1]}")
    return pairwise_distances(Gallery(c[None, :]), qv)[:, 0]


def knn_score(g, q, k: int = DEFAULT_K) -> np.ndarray:
    """Mean of the k smallest gallery distances per query.

    Ties in distance are broken by lower gallery index; the tie rule affects
    neither the distance multiset nor the score.
    """
    gal = g if isinstance(g, Gallery) else Gallery(g)
    if k < 1 or gal.n < k:
        raise ValueError(f"need gallery size >= k >= 1, got n={gal.n}, k={k}")
    qv = _rows(q)
    dists = pairwise_distances(gal, qv)
    dists.sort(axis=1)
    return dists[:, :k].mean(axis=1)


@dataclass
class KMeansModel:
    centroids: np.ndarray

    def __post_init__(self):
        self.centroids = _rows(self.centroids)
        if not np.isfinite(self.centroids).all():
            raise ValidationError("centroids must be finite")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def kmeans_fit(g, k: int = DEFAULT_MEANS, seed: int = 0, tol: float = 1e-6, max_iter: int = 300) -> KMeansModel:
    """D^2-weighted (k-means++) seeding, then Lloyd iterations until centroid
    movement < tol. Empty clusters re-seed to the point farthest from its
    assigned centroid.
    """
    gal = g if isinstance(g, Gallery) else Gallery(g)
    x = gal.features
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(x, k, rng)
    for _ in range(max_iter):
        dists = pairwise_distances(Gallery(centroids), x)
        assign = dists.argmin(axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
            else:
                new_centroids[j] = x[dists[np.arange(n), assign].argmax()]
        movement = np.linalg.norm(new_centroids - centroids)
        centroids = new_centroids
        if movement < tol:
            break
    return KMeansModel(centroids)


def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    if k == 1:
        return centroids
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j:] = centroids[0]
            return centroids
        centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans_score(m: KMeansModel, q) -> np.ndarray:
    """Distance to the nearest centroid, per query row."""
    qv = _rows(q)
    if qv.shape[1] != m.centroids.shape[1]:
        raise ValueError("query dimension does not match centroid dimension")
    return pairwise_distances(Gallery(m.centroids), qv).min(axis=1)


@dataclass
class WhiteningTransform:
    """Affine map x -> A (x - mu) giving unit covariance on the fitting set."""

    mean: np.ndarray
    projection: np.ndarray
    epsilon: float


def whitening_fit(train, epsilon: float = 1e-5) -> WhiteningTransform:
    """Closed-form whitening from the eigendecomposition of the sample covariance.

    Eigenvalues are floored at ``epsilon`` so rank-deficient data stays finite.
    """
    x = _rows(train)
    if x.shape[0] < 2:
        raise ValueError("whitening needs at least two rows")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    floored = np.maximum(eigvals, epsilon)
    projection = (eigvecs / np.sqrt(floored)).T
    return WhiteningTransform(mean=mu, projection=projection, epsilon=epsilon)


def whitening_apply(t: WhiteningTransform, q) -> np.ndarray:
    qv = _rows(q)
    if qv.shape[1] != t.mean.shape[0]:
        raise ValueError("query dimension does not match the fitted transform")
    return (qv - t.mean) @ t.projection.T


def checkpoint_normalizer(
    ckpt: Checkpoint,
    train,
    val_fraction: float = 0.1,
    k: int = DEFAULT_K,
    seed: int = 0,
    method: str = "knn",
    center: np.ndarray | None = None,
) -> float:
    """Typical normal-sample score under one checkpoint, stored as ``normalizer``.

    Default method: mean kNN distance of a held-out validation slice against
    the remaining gallery slice, both mapped by the checkpoint. The ``loss``
    method instead uses the mean squared distance of the full training set to
    ``center``. Collapsed checkpoints (zero normalizer) are flagged degenerate
    and raise.
    """
    feats = forward(ckpt.params, _rows(train))
    if method == "knn":
        split = split_train_val(FeatureMatrix(feats), val_fraction, seed)
        gallery = feats[split.gallery_indices]
        val = feats[split.validation_indices]
        if gallery.shape[0] < k:
            raise ValueError("gallery slice smaller than k; use more data or a smaller split")
        s_t = float(knn_score(Gallery(gallery), val, k).mean())
    elif method == "loss":
        if center is None:
            raise ValueError("loss-based normalizer needs the compactness center")
        diff = feats - np.asarray(center, dtype=np.float64)
        s_t = float((diff * diff).sum(axis=1).mean())
    else:
        raise ValueError(f"unknown normalizer method {method!r}")
    if not np.isfinite(s_t) or s_t <= 0.0:
        ckpt.degenerate = True
        ckpt.normalizer = None
        raise DegenerateNormalizerError(
            f"checkpoint at minibatch {ckpt.minibatch_index} has collapsed features (s_t={s_t})"
        )
    ckpt.normalizer = s_t
    return s_t


def attach_normalizers(bank, train, val_fraction: float = 0.1, k: int = DEFAULT_K, seed: int = 0) -> int:
    """Fill ``normalizer`` on every checkpoint in a bank, skipping collapsed ones.

    Returns the number of usable checkpoints.
    """
    usable = 0
    for ckpt in bank.checkpoints:
        try:
            checkpoint_normalizer(ckpt, train, val_fraction=val_fraction, k=k, seed=seed)
            usable += 1
        except DegenerateNormalizerError:
            continue
    return usable


def _usable_checkpoints(bank):
    cap = getattr(bank, "ses_sample_cap", None)
    batch = getattr(bank, "batch_size", 1)
    out = []
    for ckpt in bank.checkpoints:
        if ckpt.degenerate or ckpt.normalizer is None or ckpt.normalizer <= 0.0:
            continue
        if cap is not None and ckpt.minibatch_index * batch > cap:
            continue
        out.append(ckpt)
    return out


def ses_score(bank, g_train, q, k: int = DEFAULT_K) -> np.ndarray:
    """Sample-wise early stopping: max over checkpoints of kNN score / normalizer.

    Each query is scored independently from the gallery statistics alone, so
    no test-set labels or other test samples enter the decision.
    """
    checkpoints = _usable_checkpoints(bank)
    if not checkpoints:
        raise DegenerateNormalizerError("no usable checkpoint in the bank (all collapsed or unnormalized)")
    g_rows = _rows(g_train)
    q_rows = _rows(q)
    best = np.full(q_rows.shape[0], -np.inf)
    for ckpt in checkpoints:
        gallery = Gallery(forward(ckpt.params, g_rows))
        scores = knn_score(gallery, forward(ckpt.params, q_rows), k) / ckpt.normalizer
        np.maximum(best, scores, out=best)
    return best
