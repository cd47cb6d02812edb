"""ROC-AUC, the one-class experiment protocol, and the seeded synthetic
benchmark generator used for desk-scale validation."""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import OptState, default_widths, forward, init_adapter, init_head, pretrain_classifier
from .feature_store import FeatureMatrix, one_class_split
from .objectives import OEHead, fisher_diagonal, oe_score
from .scoring import (
    Gallery,
    attach_normalizers,
    center_distance_score,
    kmeans_fit,
    kmeans_score,
    knn_score,
    ses_score,
    whitening_apply,
    whitening_fit,
)
from .trainer import FIXED_STOP_MINIBATCHES, TrainConfig, adapt, oe_config, train_jo, train_oe

VARIANTS = ("unadapted", "whitening", "ewc", "unregularized", "fixed-stop", "ses", "jo", "oe")
SCORERS = ("knn", "center", "kmeans")


def roc_auc(scores, labels) -> float:
    """Probability a random anomalous sample outscores a random normal one.

    Rank (Mann-Whitney) formulation with average ranks, so ties count 1/2.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank = (ends - counts + 1 + ends) / 2.0
    ranks = avg_rank[inverse]
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ScoreReport:
    """Scores, anomaly labels, and the resulting AUC for one experiment run."""

    scores: np.ndarray
    labels: np.ndarray
    auc: float
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SyntheticSpec:
    """Seeded Gaussian-blob benchmark standing in for image datasets.

    Class 0 is the held-out normal class; classes for auxiliary pretraining
    live in the same informative subspace, and anomalies are the normal blob
    displaced toward one of them, while high-variance nuisance dimensions
    drown the displacement for unadapted distances. ``collapse_prone``
    narrows the anomaly margin so unregularized compactness training
    demonstrably erodes separability. ``aux_label_noise`` optionally flips a
    fraction of pretraining labels to keep the auxiliary task from being
    perfectly solvable.
    """

    seed: int = 0
    d: int = 16
    num_aux_classes: int = 4
    samples_per_class: int = 192
    displacement: float = 7.5
    collapse_prone: bool = False
    informative_dims: int = 4
    aux_radius: float = 6.0
    noise_informative: float = 1.0
    noise_nuisance: float = 4.5
    aux_label_noise: float = 0.0

    def __post_init__(self):
        if self.d < 2 or self.informative_dims < 1 or self.informative_dims > self.d:
            raise ValueError("need d >= 2 and 1 <= informative_dims <= d")
        if self.num_aux_classes < 2 or self.samples_per_class < 1:
            raise ValueError("need at least two auxiliary classes and one sample per class")
        if self.displacement < 0:
            raise ValueError("displacement must be nonnegative")
        if not 0.0 <= self.aux_label_noise < 1.0:
            raise ValueError("aux_label_noise must be in [0, 1)")


def make_synthetic(spec: SyntheticSpec):
    """Generate ``(train, test, aux)`` feature matrices, all labeled.

    ``train`` holds normal-class rows (label 0); ``test`` mixes fresh normal
    rows (label 0) with displaced anomalies (label 1); ``aux`` holds the
    pretraining classes relabeled 0..C-1, with the normal class held out.
    """
    rng = np.random.default_rng(spec.seed)
    d, k_info = spec.d, spec.informative_dims

    def blob(center, count, nuisance_scale):
        noise = np.zeros((count, d))
        noise[:, :k_info] = rng.normal(0.0, spec.noise_informative, size=(count, k_info))
        noise[:, k_info:] = rng.normal(0.0, nuisance_scale, size=(count, d - k_info))
        return center + noise

    nuisance = spec.noise_nuisance
    train_n = spec.samples_per_class
    displacement = spec.displacement * (0.8 if spec.collapse_prone else 1.0)

    normal_center = np.zeros(d)
    aux_dirs = rng.normal(size=(spec.num_aux_classes, k_info))
    aux_dirs /= np.linalg.norm(aux_dirs, axis=1, keepdims=True)
    # anomalies drift toward the first auxiliary class, the way one-class
    # image anomalies are other object categories the pretraining saw
    anomaly_center = np.zeros(d)
    anomaly_center[:k_info] = displacement * aux_dirs[0]

    aux_rows, aux_labels = [], []
    for cls in range(spec.num_aux_classes):
        center = np.zeros(d)
        center[:k_info] = spec.aux_radius * aux_dirs[cls]
        aux_rows.append(blob(center, spec.samples_per_class, nuisance))
        aux_labels.append(np.full(spec.samples_per_class, cls))
    labels = np.concatenate(aux_labels)
    if spec.aux_label_noise > 0.0:
        # irreducible classification error keeps pretraining gradients (and
        # therefore the importance weights) away from zero
        flip = rng.random(labels.size) < spec.aux_label_noise
        labels = np.where(flip, rng.integers(0, spec.num_aux_classes, labels.size), labels)
    aux = FeatureMatrix(np.vstack(aux_rows).astype(np.float32), labels.astype(np.int32))

    train = FeatureMatrix(
        blob(normal_center, train_n, nuisance).astype(np.float32),
        np.zeros(train_n, dtype=np.int32),
    )
    test_normal = blob(normal_center, spec.samples_per_class, nuisance)
    test_anom = blob(anomaly_center, spec.samples_per_class, nuisance)
    test = FeatureMatrix(
        np.vstack([test_normal, test_anom]).astype(np.float32),
        np.concatenate(
            [np.zeros(spec.samples_per_class, dtype=np.int32), np.ones(spec.samples_per_class, dtype=np.int32)]
        ),
    )
    return train, test, aux


PRETRAIN_OPT = dict(learning_rate=0.05, momentum=0.9, weight_decay=1e-4, clip_norm=5.0)


@dataclass
class ExperimentConfig:
    """One pipeline run: variant, architecture, schedules, scorer, seed."""

    variant: str = "unadapted"
    scorer: str = "knn"
    k: int = 2
    means: int = 10
    seed: int = 0
    hidden_layers: int = 2
    pretrain_minibatches: int = 600
    fisher_minibatches: int = 100
    batch_size: int = 32
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    aux: FeatureMatrix | None = None
    oe: FeatureMatrix | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")


def _derive_aux(train: FeatureMatrix, normal_class: int) -> FeatureMatrix:
    """Non-target classes of a labeled train set, relabeled to 0..C-1."""
    mask = train.labels != normal_class
    if not mask.any():
        raise ValueError("no auxiliary classes besides the normal class")
    labels = train.labels[mask]
    classes = np.unique(labels)
    remap = {int(c): i for i, c in enumerate(classes)}
    relabeled = np.asarray([remap[int(v)] for v in labels], dtype=np.int32)
    return FeatureMatrix(train.data[mask], relabeled)


def _score_features(cfg: ExperimentConfig, gallery: np.ndarray, queries: np.ndarray) -> np.ndarray:
    if cfg.scorer == "knn":
        return knn_score(Gallery(gallery), queries, cfg.k)
    if cfg.scorer == "center":
        return center_distance_score(gallery.mean(axis=0), queries)
    return kmeans_score(kmeans_fit(Gallery(gallery), cfg.means, seed=cfg.seed), queries)


def pretrain_stage(cfg: ExperimentConfig, aux: FeatureMatrix):
    """Auxiliary-task pretraining producing the starting adapter and head."""
    widths = default_widths(aux.d, cfg.hidden_layers)
    psi0 = init_adapter(widths, seed=cfg.seed)
    num_classes = int(aux.labels.max()) + 1
    head = init_head(num_classes, widths[-1], seed=cfg.seed + 1)
    opt = OptState(**PRETRAIN_OPT)
    pretrain_classifier(psi0, head, aux, opt, cfg.pretrain_minibatches, cfg.batch_size, seed=cfg.seed + 2)
    return psi0, head


def run_one_class_experiment(
    train: FeatureMatrix, test: FeatureMatrix, normal_class: int, cfg: ExperimentConfig
) -> ScoreReport:
    """Full protocol for one normal class: split, (pretrain, adapt), score, AUC."""
    normal_train, test, anomaly = one_class_split(train, test, normal_class)
    meta = {"variant": cfg.variant, "scorer": cfg.scorer, "normal_class": int(normal_class), "seed": cfg.seed}

    if cfg.variant == "unadapted":
        scores = _score_features(cfg, normal_train.values(), test.values())
    elif cfg.variant == "whitening":
        transform = whitening_fit(normal_train)
        scores = _score_features(
            cfg, whitening_apply(transform, normal_train), whitening_apply(transform, test)
        )
    else:
        aux = cfg.aux if cfg.aux is not None else _derive_aux(train, normal_class)
        psi0, head = pretrain_stage(cfg, aux)
        if cfg.variant == "jo":
            psi = train_jo(psi0, head, aux, normal_train, cfg.train_cfg)
            scores = _score_features(cfg, forward(psi, normal_train), forward(psi, test))
        elif cfg.variant == "oe":
            if cfg.oe is None:
                raise ValueError("variant 'oe' needs an exposure feature set")
            rng = np.random.default_rng(cfg.seed + 3)
            head0 = OEHead(rng.normal(0.0, 0.01, size=psi0.output_dim), 0.0)
            psi, oe_head = train_oe(psi0, head0, normal_train, cfg.oe, oe_config(cfg.train_cfg))
            scores = oe_score(psi, oe_head, test)
        else:
            F = fisher_diagonal(psi0, head, aux, cfg.fisher_minibatches, cfg.batch_size, seed=cfg.seed + 4)
            tc = cfg.train_cfg
            if cfg.variant == "ewc":
                tc = replace(tc, adapt=replace(tc.adapt, mode="ewc"))
            elif cfg.variant in ("unregularized", "ses"):
                tc = replace(tc, adapt=replace(tc.adapt, mode="unregularized"))
            elif cfg.variant == "fixed-stop":
                tc = replace(
                    tc,
                    adapt=replace(tc.adapt, mode="unregularized"),
                    total_minibatches=min(tc.total_minibatches, FIXED_STOP_MINIBATCHES),
                )
            psi, bank, _ = adapt(psi0, normal_train, F, tc)
            if cfg.variant == "ses":
                attach_normalizers(bank, normal_train, k=cfg.k, seed=cfg.seed + 5)
                scores = ses_score(bank, normal_train, test, cfg.k)
            else:
                scores = _score_features(cfg, forward(psi, normal_train), forward(psi, test))

    auc = roc_auc(scores, anomaly)
    return ScoreReport(scores=np.asarray(scores), labels=np.asarray(anomaly), auc=auc, metadata=meta)


def report(reports: list[ScoreReport]):
    """Per-class AUC table plus the average, as (csv_text, aligned_text)."""
    if not reports:
        raise ValueError("report needs at least one score report")
    csv_buf = io.StringIO()
    csv_buf.write("class,variant,auc\n")
    lines = [f"{'class':>8} {'variant':>14} {'auc':>8}"]
    for r in reports:
        cls = r.metadata.get("normal_class", "-")
        variant = r.metadata.get("variant", "-")
        csv_buf.write(f"{cls},{variant},{r.auc!r}\n")
        lines.append(f"{cls!s:>8} {variant:>14} {r.auc:8.4f}")
    avg = float(np.mean([r.auc for r in reports]))
    csv_buf.write(f"average,,{avg!r}\n")
    lines.append(f"{'average':>8} {'':>14} {avg:8.4f}")
    return csv_buf.getvalue(), "\n".join(lines)
