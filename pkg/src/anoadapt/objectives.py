"""Loss functions of the adaptation engine, each returning (value, gradient).

Conventions: the compactness term is summed over its batch; cross-entropy and
outlier-exposure terms are averaged per batch. This keeps the joint weight and
the elastic weight scale-stable across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterParams, ClassifierHead, backward, cross_entropy_grads, forward, minibatch_indices
from .errors import ValidationError
from .feature_store import FeatureMatrix

MODES = ("ewc", "unregularized", "l2-uniform")


@dataclass
class AdaptConfig:
    """Weights selecting how adaptation is regularized.

    ``lam`` is the elastic penalty weight (1e4 unless overridden), ``alpha``
    weights the compactness term in joint-optimization mode, and ``mode``
    picks elastic / no / uniform-quadratic regularization.
    """

    lam: float = 1e4
    alpha: float = 1.0
    mode: str = "ewc"

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lam and alpha must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class OEHead:
    """Linear logit head for outlier-exposure training: z = w.x + b."""

    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 1 or not np.isfinite(self.w).all() or not np.isfinite(self.b):
            raise ValidationError("OE head must be a finite vector plus scalar bias")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w, [self.b]])

    def set_flat(self, vec: np.ndarray) -> None:
        self.w = vec[:-1].copy()
        self.b = float(vec[-1])


def _batch_values(batch) -> np.ndarray:
    if isinstance(batch, FeatureMatrix):
        return batch.values()
    return np.asarray(batch, dtype=np.float64)


def center_init(psi0: AdapterParams, train) -> np.ndarray:
    """Mean of the pretrained features over the training set; fixed thereafter."""
    x = _batch_values(train)
    if x.shape[0] < 1:
        raise ValueError("center_init needs a nonempty training set")
    return forward(psi0, x).mean(axis=0)


def compactness_loss(p: AdapterParams, batch, c: np.ndarray):
    """Sum of squared distances of mapped batch rows to the fixed center.

    Returns ``(loss, grad)`` with ``grad`` w.r.t. the flat adapter parameters.
    """
    x = _batch_values(batch)
    feats = forward(p, x)
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (feats.shape[1],):
        raise ValueError(f"center has dimension {c.shape}, features have {feats.shape[1]}")
    resid = feats - c
    loss = float((resid * resid).sum())
    grad = backward(p, x, 2.0 * resid)
    return loss, grad


def fisher_diagonal(
    psi0: AdapterParams,
    head: ClassifierHead,
    aux: FeatureMatrix,
    num_minibatches: int = 100,
    batch_size: int = 32,
    seed: int = 0,
) -> np.ndarray:
    """Per-parameter average squared gradient of the pretraining loss.

    The average runs over individual samples drawn in minibatches from the
    auxiliary set; only adapter parameters are covered, the classifier head is
    discarded after pretraining. For this network family the per-sample
    squared weight gradient factorizes as (delta_i)^2 outer (activation_i)^2,
    so the whole batch is accumulated with one contraction per layer.
    """
    if aux.labels is None:
        raise ValueError("fisher_diagonal needs labeled auxiliary data")
    if head.weight.shape[1] != psi0.output_dim:
        raise ValueError("classifier head width does not match adapter output")
    x_all = aux.values()
    y_all = np.asarray(aux.labels, dtype=np.int64)
    acc_w = [np.zeros_like(w) for w in psi0.weights]
    acc_b = [np.zeros_like(b) for b in psi0.biases]
    total = 0
    for idx in minibatch_indices(aux.n, batch_size, num_minibatches, seed):
        x, y = x_all[idx], y_all[idx]
        acts = _per_layer_activations(psi0, x)
        logits = acts[-1] @ head.weight.T + head.bias
        probs = _softmax(logits)
        probs[np.arange(len(y)), y] -= 1.0
        delta = probs @ head.weight
        for i in range(len(psi0.weights) - 1, -1, -1):
            acc_w[i] += np.einsum("ni,nj->ij", delta**2, acts[i] ** 2)
            acc_b[i] += (delta**2).sum(axis=0)
            if i > 0:
                delta = (delta @ psi0.weights[i]) * (acts[i] > 0)
        total += len(y)
    parts = []
    for gw, gb in zip(acc_w, acc_b):
        parts.append((gw / total).ravel())
        parts.append(gb / total)
    return np.concatenate(parts)


def _per_layer_activations(p: AdapterParams, x: np.ndarray):
    acts = [x]
    a = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = a @ w.T + b
        if i < last:
            a = np.maximum(a, 0.0)
        acts.append(a)
    return acts


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ewc_penalty(p: AdapterParams, psi0: AdapterParams, F: np.ndarray, lam: float):
    """Elastic quadratic penalty (lam/2) * sum_i F_i (theta_i - theta0_i)^2."""
    theta = p.flatten()
    theta0 = psi0.flatten()
    F = np.asarray(F, dtype=np.float64)
    if theta.shape != theta0.shape or F.shape != theta.shape:
        raise ValueError("parameter vectors and importance weights must have equal length")
    diff = theta - theta0
    penalty = 0.5 * lam * float(F @ (diff * diff))
    grad = lam * F * diff
    return penalty, grad


def joint_loss(
    p: AdapterParams,
    head: ClassifierHead,
    aux_batch: FeatureMatrix,
    target_batch,
    c: np.ndarray,
    alpha: float,
):
    """Mean auxiliary cross-entropy plus alpha-weighted compactness.

    Returns ``(loss, adapter_grad, head_grad)``.
    """
    if aux_batch.labels is None:
        raise ValueError("joint loss needs a labeled auxiliary batch")
    ce, g_adapter, g_head = cross_entropy_grads(
        p, head, aux_batch.values(), np.asarray(aux_batch.labels, dtype=np.int64)
    )
    cl, g_compact = compactness_loss(p, target_batch, c)
    return ce + alpha * cl, g_adapter + alpha * g_compact, g_head


def oe_loss(p: AdapterParams, head: OEHead, normal_batch, oe_batch, train_bias: bool = True):
    """Binary cross-entropy separating normal (0) from exposure (1) samples.

    Per-batch means are summed; gradients cover adapter and head, with the
    bias gradient zeroed when ``train_bias`` is off.
    """
    xn = _batch_values(normal_batch)
    xo = _batch_values(oe_batch)
    if xn.shape[0] < 1 or xo.shape[0] < 1:
        raise ValueError("both batches must be nonempty")
    loss = 0.0
    g_adapter = np.zeros(p.num_params)
    g_w = np.zeros_like(head.w)
    g_b = 0.0
    for x, target in ((xn, 0.0), (xo, 1.0)):
        feats = forward(p, x)
        z = feats @ head.w + head.b
        # stable log-sigmoid BCE: log(1+exp(-|z|)) + max(z,0) - z*target
        loss += float(np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * target))
        dz = (_sigmoid(z) - target) / x.shape[0]
        g_w += feats.T @ dz
        g_b += float(dz.sum())
        g_adapter += backward(p, x, np.outer(dz, head.w))
    if not train_bias:
        g_b = 0.0
    return loss, g_adapter, np.concatenate([g_w, [g_b]])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def oe_score(p: AdapterParams, head: OEHead, q) -> np.ndarray:
    """Anomaly score of the exposure-trained model: the raw logit."""
    return forward(p, _batch_values(q)) @ head.w + head.b
