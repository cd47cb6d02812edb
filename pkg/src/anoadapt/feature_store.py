"""Feature dataset container, binary/CSV serialization, and dataset splits.

The binary feature file is the canonical interchange format of the engine
(little-endian):

    bytes 0-3   magic ``PNDF``
    bytes 4-7   version, u32 (= 1)
    bytes 8-15  n, u64
    bytes 16-23 d, u64
    byte  24    flags, u8 (bit 0: label section present)
    next        n*d float32 values, row-major
    next        n int32 labels, only if flagged

CSV ingestion is a convenience; the first line is a header and an optional
trailing ``label`` column carries integer class ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

MAGIC = b"PNDF"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")


@dataclass(frozen=True)
class FeatureMatrix:
    """An n x d matrix of feature vectors with optional integer labels.

    Immutable after construction; the payload is stored 32-bit on disk and
    promoted to 64-bit wherever the engine computes with it.
    """

    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"feature matrix must be 2-D with n,d >= 1, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("feature matrix contains non-finite entries")
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int32)
            if labels.shape != (data.shape[0],):
                raise ValidationError(f"labels must have length n={data.shape[0]}, got shape {labels.shape}")
            if (labels < 0).any():
                raise ValidationError("labels must be nonnegative")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def values(self) -> np.ndarray:
        """The payload as float64, the precision all computation uses."""
        return np.asarray(self.data, dtype=np.float64)

    def with_labels(self, labels) -> "FeatureMatrix":
        return FeatureMatrix(self.data, labels)

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        if self.data.shape != other.data.shape or not np.array_equal(self.data, other.data):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint gallery/validation index partition of a feature matrix."""

    gallery_indices: np.ndarray
    validation_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def save_feature_file(m: FeatureMatrix, path) -> None:
    """Write ``m`` in the canonical binary format (float32 payload)."""
    flags = 1 if m.labels is not None else 0
    payload = np.ascontiguousarray(m.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m.n, m.d, flags))
        fh.write(payload.tobytes())
        if m.labels is not None:
            fh.write(np.ascontiguousarray(m.labels, dtype="<i4").tobytes())


def load_feature_file(path) -> FeatureMatrix:
    """Read a canonical binary feature file, validating header and payload."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too small to hold a header")
    magic, version, n, d, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise ValidationError(f"{path}: declared shape {n}x{d} is empty")
    want = _HEADER.size + 4 * n * d + (4 * n if flags & 1 else 0)
    if len(raw) < want:
        raise CorruptionError(f"{path}: payload truncated ({len(raw)} bytes, expected {want})")
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    if not np.isfinite(data).all():
        raise ValidationError(f"{path}: payload contains non-finite entries")
    labels = None
    if flags & 1:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEADER.size + 4 * n * d)
    return FeatureMatrix(data.copy(), None if labels is None else labels.copy())


def load_feature_csv(path) -> FeatureMatrix:
    """Read a UTF-8 CSV with a header row; a trailing ``label`` column is optional."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise FormatError(f"{path}: empty CSV")
        columns = [c.strip() for c in header.split(",")]
        has_labels = columns and columns[-1] == "label"
        rows = []
        labels = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(columns):
                raise CorruptionError(f"{path}:{line_no}: expected {len(columns)} fields, got {len(parts)}")
            if has_labels:
                rows.append([float(v) for v in parts[:-1]])
                labels.append(int(parts[-1]))
            else:
                rows.append([float(v) for v in parts])
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float32)
    return FeatureMatrix(data, np.asarray(labels, dtype=np.int32) if has_labels else None)


def save_feature_csv(m: FeatureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        cols = [f"f{i}" for i in range(m.d)] + (["label"] if m.labels is not None else [])
        fh.write(",".join(cols) + "\n")
        for i in range(m.n):
            row = [repr(float(v)) for v in m.data[i]]
            if m.labels is not None:
                row.append(str(int(m.labels[i])))
            fh.write(",".join(row) + "\n")


def split_train_val(m: FeatureMatrix, val_fraction: float, seed: int) -> DatasetSplit:
    """Partition row indices into gallery/validation, deterministic in ``seed``."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = int(round(m.n * val_fraction))
    if n_val < 1:
        raise ValueError(f"n*val_fraction = {m.n * val_fraction:.3f} selects no validation rows")
    n_val = min(n_val, m.n - 1)
    perm = np.random.default_rng(seed).permutation(m.n)
    return DatasetSplit(
        gallery_indices=np.sort(perm[n_val:]).astype(np.int64),
        validation_indices=np.sort(perm[:n_val]).astype(np.int64),
    )


def one_class_split(train: FeatureMatrix, test: FeatureMatrix, normal_class: int):
    """One-class protocol: normal-only train rows, full test set, anomaly labels.

    Returns ``(normal_train, test, anomaly_labels)`` where ``anomaly_labels[i]``
    is 1 iff ``test.labels[i] != normal_class``.
    """
    if train.labels is None or test.labels is None:
        raise ValueError("one_class_split requires labeled train and test matrices")
    mask = train.labels == normal_class
    if not mask.any():
        raise ValueError(f"normal class {normal_class} does not occur in the train labels")
    normal_train = FeatureMatrix(train.data[mask], train.labels[mask])
    anomaly = (test.labels != normal_class).astype(np.int8)
    return normal_train, test, anomaly
