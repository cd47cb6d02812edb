"""Adaptation training loops: elastic-regularized compactness descent with a
checkpoint bank, plus the joint-optimization and outlier-exposure modes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import (
    AdapterParams,
    Checkpoint,
    ClassifierHead,
    OptState,
    minibatch_indices,
    snapshot,
)
from .errors import TrainingAbortedError
from .feature_store import FeatureMatrix
from .objectives import AdaptConfig, OEHead, center_init, compactness_loss, ewc_penalty, joint_loss, oe_loss

EWC_MINIBATCHES = 7800
FIXED_STOP_MINIBATCHES = 2300
SES_SAMPLE_CAP = 150_000
CKPT_EPOCH_INTERVAL = 5


@dataclass
class TrainConfig:
    """Everything one run needs: regularization, optimizer, schedule, seed."""

    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-5
    clip_norm: float = 1e-3
    total_minibatches: int = EWC_MINIBATCHES
    batch_size: int = 32
    checkpoint_interval: int | None = None  # None: every 5 passes over the data
    ses_sample_cap: int = SES_SAMPLE_CAP
    seed: int = 0

    def opt_state(self) -> OptState:
        return OptState(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
        )

    def interval_for(self, n: int) -> int:
        if self.checkpoint_interval is not None:
            return max(1, self.checkpoint_interval)
        batches_per_epoch = -(-n // self.batch_size)
        return CKPT_EPOCH_INTERVAL * batches_per_epoch


@dataclass
class CheckpointBank:
    """Ordered adapter snapshots; the first entry is always the starting model."""

    checkpoints: list[Checkpoint]
    interval: int
    batch_size: int
    ses_sample_cap: int = SES_SAMPLE_CAP

    def __post_init__(self):
        indices = [c.minibatch_index for c in self.checkpoints]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise ValueError("checkpoint minibatch indices must be strictly increasing")


@dataclass
class TrainRun:
    """Per-minibatch trace of one training run."""

    config: TrainConfig
    loss_trace: list[float] = field(default_factory=list)
    penalty_trace: list[float] = field(default_factory=list)

    def write_trace_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("minibatch,loss,penalty\n")
            for i, (loss, pen) in enumerate(zip(self.loss_trace, self.penalty_trace), start=1):
                fh.write(f"{i},{loss!r},{pen!r}\n")


def adapt(psi0: AdapterParams, train, F: np.ndarray, cfg: TrainConfig):
    """Compactness training from ``psi0`` with the configured regularizer.

    Snapshots land in the bank every ``interval`` minibatches (the bank always
    opens with the unadapted model at index 0). A non-finite loss aborts with
    ``TrainingAbortedError`` carrying the partial bank and trace.
    """
    x = train.values() if isinstance(train, FeatureMatrix) else np.asarray(train, dtype=np.float64)
    if x.shape[0] < 1:
        raise ValueError("adapt needs a nonempty training set")
    mode = cfg.adapt.mode
    lam = 0.0 if mode == "unregularized" else cfg.adapt.lam
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (psi0.num_params,):
        raise ValueError(f"importance vector length {F.shape} != parameter count {psi0.num_params}")
    if mode == "l2-uniform":
        F = np.ones_like(F)

    psi = psi0.copy()
    c = center_init(psi0, x)
    opt = cfg.opt_state()
    interval = cfg.interval_for(x.shape[0])
    bank = CheckpointBank(
        checkpoints=[snapshot(psi0, 0)],
        interval=interval,
        batch_size=cfg.batch_size,
        ses_sample_cap=cfg.ses_sample_cap,
    )
    run = TrainRun(config=cfg)

    step = 0
    for idx in minibatch_indices(x.shape[0], cfg.batch_size, cfg.total_minibatches, cfg.seed):
        step += 1
        loss, grad = compactness_loss(psi, x[idx], c)
        penalty = 0.0
        if lam > 0.0:
            penalty, pgrad = ewc_penalty(psi, psi0, F, lam)
            grad = grad + pgrad
        run.loss_trace.append(loss)
        run.penalty_trace.append(penalty)
        if not np.isfinite(loss + penalty) or not np.isfinite(grad).all():
            raise TrainingAbortedError(
                f"non-finite loss at minibatch {step}", params=psi, bank=bank, run=run
            )
        psi.set_flat(opt.step(psi.flatten(), grad))
        if step % interval == 0:
            bank.checkpoints.append(snapshot(psi, step))
    return psi, bank, run


def train_jo(
    psi0: AdapterParams,
    head: ClassifierHead,
    aux: FeatureMatrix,
    train,
    cfg: TrainConfig,
) -> AdapterParams:
    """Joint optimization: each step sums gradients from one auxiliary
    classification minibatch and one compactness minibatch on the target set."""
    if aux.labels is None:
        raise ValueError("joint optimization needs labeled auxiliary data")
    x = train.values() if isinstance(train, FeatureMatrix) else np.asarray(train, dtype=np.float64)
    aux_x = aux.values()
    aux_y = np.asarray(aux.labels, dtype=np.int64)
    psi = psi0.copy()
    jo_head = ClassifierHead(head.weight.copy(), head.bias.copy())
    c = center_init(psi0, x)
    opt = cfg.opt_state()
    n_adapter = psi.num_params

    aux_batches = minibatch_indices(aux.n, cfg.batch_size, cfg.total_minibatches, cfg.seed)
    tgt_batches = minibatch_indices(x.shape[0], cfg.batch_size, cfg.total_minibatches, cfg.seed + 1)
    for step, (ia, it) in enumerate(zip(aux_batches, tgt_batches), start=1):
        batch = FeatureMatrix(aux_x[ia], aux_y[ia])
        loss, g_adapter, g_head = joint_loss(psi, jo_head, batch, x[it], c, cfg.adapt.alpha)
        if not np.isfinite(loss):
            raise TrainingAbortedError(f"non-finite joint loss at minibatch {step}", params=psi)
        joint = opt.step(
            np.concatenate([psi.flatten(), jo_head.flatten()]),
            np.concatenate([g_adapter, g_head]),
        )
        psi.set_flat(joint[:n_adapter])
        jo_head.set_flat(joint[n_adapter:])
    return psi


def oe_config(cfg: TrainConfig | None = None) -> TrainConfig:
    """Outlier-exposure defaults: lr 0.1, momentum 0.9, no weight decay."""
    base = cfg if cfg is not None else TrainConfig()
    return replace(base, learning_rate=0.1, weight_decay=0.0)


def train_oe(
    psi0: AdapterParams,
    oe_head: OEHead,
    train,
    oe,
    cfg: TrainConfig,
    train_bias: bool = True,
):
    """Logistic-separation training of adapter + linear head against exposure data."""
    xn = train.values() if isinstance(train, FeatureMatrix) else np.asarray(train, dtype=np.float64)
    xo = oe.values() if isinstance(oe, FeatureMatrix) else np.asarray(oe, dtype=np.float64)
    if xn.shape[0] < 1 or xo.shape[0] < 1:
        raise ValueError("both the normal and the exposure set must be nonempty")
    psi = psi0.copy()
    head = OEHead(oe_head.w.copy(), oe_head.b)
    opt = cfg.opt_state()
    n_adapter = psi.num_params

    normal_batches = minibatch_indices(xn.shape[0], cfg.batch_size, cfg.total_minibatches, cfg.seed)
    oe_batches = minibatch_indices(xo.shape[0], cfg.batch_size, cfg.total_minibatches, cfg.seed + 1)
    for step, (i_n, i_o) in enumerate(zip(normal_batches, oe_batches), start=1):
        loss, g_adapter, g_head = oe_loss(psi, head, xn[i_n], xo[i_o], train_bias=train_bias)
        if not np.isfinite(loss):
            raise TrainingAbortedError(f"non-finite exposure loss at minibatch {step}", params=psi)
        joint = opt.step(np.concatenate([psi.flatten(), head.flatten()]), np.concatenate([g_adapter, g_head]))
        psi.set_flat(joint[:n_adapter])
        head.set_flat(joint[n_adapter:])
    return psi, head
