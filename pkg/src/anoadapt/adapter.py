"""The trainable feature-adapter network and its optimizer.

A small fully connected network: rectifier on hidden layers, identity on the
output layer. Forward/backward passes are explicit (no autodiff graph) and all
math runs in float64 so gradient checks stay tight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, FormatError, NumericError, ValidationError
from .feature_store import FeatureMatrix

CKPT_MAGIC = b"PNDC"
CKPT_VERSION = 1


class AdapterParams:
    """Weights/biases of the adapter, one (out x in) matrix + bias per layer."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValidationError("need one bias vector per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValidationError(f"layer {i}: weight {w.shape} and bias {b.shape} are incompatible")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValidationError(f"layer {i}: input width {w.shape[1]} != previous output width")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValidationError(f"layer {i}: non-finite parameters")

    @property
    def layer_widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        """Parameter vector in fixed order: W0, b0, W1, b1, ..."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {vec.shape}")
        off = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[off : off + w.size].reshape(w.shape).copy()
            off += w.size
            self.biases[i] = vec[off : off + b.size].copy()
            off += b.size

    def copy(self) -> "AdapterParams":
        return AdapterParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def from_flat(cls, vec: np.ndarray, layer_widths) -> "AdapterParams":
        widths = list(layer_widths)
        weights = [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(o) for o in widths[1:]]
        p = cls(weights, biases)
        p.set_flat(vec)
        return p


def default_widths(d: int, hidden_layers: int = 2) -> list[int]:
    """d -> 2d hidden (x hidden_layers) -> d."""
    return [d] + [2 * d] * hidden_layers + [d]


def init_adapter(layer_widths, seed: int) -> AdapterParams:
    """Fan-balanced uniform init (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    widths = list(layer_widths)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return AdapterParams(weights, biases)


@dataclass
class ClassifierHead:
    """Linear softmax head used only during auxiliary-task pretraining."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValidationError("classifier head weight/bias dimensions are incompatible")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    def set_flat(self, vec: np.ndarray) -> None:
        w_size = self.weight.size
        self.weight = vec[:w_size].reshape(self.weight.shape).copy()
        self.bias = vec[w_size:].copy()


def init_head(num_classes: int, feature_dim: int, seed: int) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (feature_dim + num_classes))
    return ClassifierHead(rng.uniform(-limit, limit, size=(num_classes, feature_dim)), np.zeros(num_classes))


@dataclass
class OptState:
    """SGD with momentum, weight decay and global-norm gradient clipping."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-5
    clip_norm: float = 1e-3
    velocity: np.ndarray | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One update on a flat parameter vector; returns the new vector."""
        if not np.isfinite(grad).all():
            raise NumericError("non-finite gradient")
        if self.velocity is None:
            self.velocity = np.zeros_like(theta)
        norm = float(np.linalg.norm(grad))
        if norm > self.clip_norm:
            grad = grad * (self.clip_norm / norm)
        self.velocity = self.momentum * self.velocity + grad + self.weight_decay * theta
        return theta - self.learning_rate * self.velocity


def sgd_step(p: AdapterParams, grad: np.ndarray, o: OptState) -> None:
    """Apply one clipped momentum-SGD update to ``p`` in place."""
    p.set_flat(o.step(p.flatten(), np.asarray(grad, dtype=np.float64)))


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values()
    return np.asarray(x, dtype=np.float64)


def forward(p: AdapterParams, x) -> np.ndarray:
    """Map inputs through the network; rectified hidden layers, linear output."""
    a = _as_array(x)
    if a.ndim != 2 or a.shape[1] != p.input_dim:
        raise ValueError(f"input width {a.shape} incompatible with adapter input {p.input_dim}")
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = a @ w.T + b
        if i < last:
            np.maximum(a, 0.0, out=a)
    return a


def _forward_trace(p: AdapterParams, x: np.ndarray):
    """Forward pass keeping post-activation values per layer (for backprop)."""
    activations = [x]
    last = len(p.weights) - 1
    a = x
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = a @ w.T + b
        if i < last:
            np.maximum(a, 0.0, out=a)
        activations.append(a)
    return activations


def backward(p: AdapterParams, x, upstream_grad) -> np.ndarray:
    """Gradient of sum(upstream_grad * forward(p, x)) w.r.t. the flat parameters."""
    a_in = _as_array(x)
    up = _as_array(upstream_grad)
    acts = _forward_trace(p, a_in)
    if up.shape != acts[-1].shape:
        raise ValueError(f"upstream gradient shape {up.shape} != output shape {acts[-1].shape}")
    grads_w = [None] * len(p.weights)
    grads_b = [None] * len(p.biases)
    delta = up
    for i in range(len(p.weights) - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            # hidden activations are post-ReLU; positive value <=> active unit
            delta = (delta @ p.weights[i]) * (acts[i] > 0)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_grads(p: AdapterParams, head: ClassifierHead, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over a batch and its gradients.

    Returns ``(loss, adapter_grad, head_grad)`` with gradients of the
    batch-mean loss, flattened in the usual parameter order.
    """
    feats = forward(p, x)
    logits = feats @ head.weight.T + head.bias
    probs = _softmax(logits)
    n = x.shape[0]
    loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    head_grad = np.concatenate([(dlogits.T @ feats).ravel(), dlogits.sum(axis=0)])
    adapter_grad = backward(p, x, dlogits @ head.weight)
    return loss, adapter_grad, head_grad


def minibatch_indices(n: int, batch_size: int, num_batches: int, seed: int):
    """Yield ``num_batches`` index arrays, reshuffling each epoch without replacement."""
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < num_batches:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if produced == num_batches:
                return
            yield perm[start : start + batch_size]
            produced += 1


def pretrain_classifier(
    p: AdapterParams,
    head: ClassifierHead,
    aux: FeatureMatrix,
    o: OptState,
    minibatches: int,
    batch_size: int = 32,
    seed: int = 0,
) -> AdapterParams:
    """Jointly train adapter + head under softmax cross-entropy on labeled data.

    Mutates ``p`` and ``head``; returns ``p`` (the pretrained extractor).
    """
    if aux.labels is None:
        raise ValueError("pretraining needs labeled auxiliary data")
    classes = np.unique(aux.labels)
    if classes.size < 2:
        raise ValueError("pretraining needs at least two classes")
    if classes.size != head.num_classes or classes.max() != classes.size - 1:
        raise ValueError(f"labels must cover 0..{head.num_classes - 1} exactly")
    x_all = aux.values()
    y_all = np.asarray(aux.labels, dtype=np.int64)
    n_adapter = p.num_params
    for idx in minibatch_indices(aux.n, batch_size, minibatches, seed):
        _, g_adapter, g_head = cross_entropy_grads(p, head, x_all[idx], y_all[idx])
        joint = o.step(np.concatenate([p.flatten(), head.flatten()]), np.concatenate([g_adapter, g_head]))
        p.set_flat(joint[:n_adapter])
        head.set_flat(joint[n_adapter:])
    return p


@dataclass
class Checkpoint:
    """A frozen copy of the adapter at a given minibatch index.

    ``normalizer`` is the per-checkpoint score scale filled in by the scoring
    module; ``degenerate`` marks checkpoints whose features collapsed and which
    must be skipped by sample-wise max scoring.
    """

    params: AdapterParams
    minibatch_index: int
    normalizer: float | None = None
    degenerate: bool = False


def snapshot(p: AdapterParams, minibatch_index: int) -> Checkpoint:
    """Deep-copied checkpoint; later mutation of ``p`` leaves it untouched."""
    return Checkpoint(params=p.copy(), minibatch_index=int(minibatch_index))


_CKPT_HEADER = struct.Struct("<4sIQBdQ")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary checkpoint: header, layer widths, float64 parameter vector."""
    flags = (1 if ckpt.normalizer is not None else 0) | (2 if ckpt.degenerate else 0)
    widths = ckpt.params.layer_widths
    flat = ckpt.params.flatten()
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CKPT_MAGIC,
                CKPT_VERSION,
                ckpt.minibatch_index,
                flags,
                ckpt.normalizer if ckpt.normalizer is not None else 0.0,
                len(widths),
            )
        )
        fh.write(np.asarray(widths, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: file too small to hold a checkpoint header")
    magic, version, mb_index, flags, s_t, n_widths = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    widths = np.frombuffer(raw, dtype="<u8", count=n_widths, offset=off).astype(int)
    off += 8 * n_widths
    n_params = int(sum(o * i + o for i, o in zip(widths[:-1], widths[1:])))
    if len(raw) < off + 8 * n_params:
        raise CorruptionError(f"{path}: parameter payload truncated")
    flat = np.frombuffer(raw, dtype="<f8", count=n_params, offset=off).copy()
    params = AdapterParams.from_flat(flat, widths)
    return Checkpoint(
        params=params,
        minibatch_index=int(mb_index),
        normalizer=float(s_t) if flags & 1 else None,
        degenerate=bool(flags & 2),
    )
