"""Cross-package flow: the extractor writes feature files the engine consumes.

Runs only when the extractor is built (frontend/dist). Images are synthetic
records in the CIFAR-10 binary layout with class-dependent intensity, so the
extracted features carry class structure without any dataset download.
"""

import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from anoadapt.evaluation import ExperimentConfig, run_one_class_experiment
from anoadapt.feature_store import load_feature_file

FRONTEND = Path(__file__).resolve().parent.parent / "frontend"
EXTRACT_CLI = FRONTEND / "dist" / "cli.js"

pytestmark = pytest.mark.skipif(
    not EXTRACT_CLI.exists() or shutil.which("node") is None,
    reason="extractor not built (cd frontend && npm run build)",
)

RECORD_BYTES = 3073


def write_batch(path: Path, labels):
    rng = np.random.default_rng(11)
    buf = bytearray()
    for label in labels:
        pixels = rng.integers(0, 60, size=RECORD_BYTES - 1, dtype=np.uint8)
        # class-dependent brightness gives the features real class structure
        pixels = np.clip(pixels.astype(np.int64) + 20 * label, 0, 255).astype(np.uint8)
        buf.append(int(label))
        buf.extend(pixels.tobytes())
    path.write_bytes(bytes(buf))


def run_extract(data_dir: Path, split: str, out: Path):
    proc = subprocess.run(
        ["node", str(EXTRACT_CLI), "extract", "--dataset", "cifar10", "--split", split,
         "--data-dir", str(data_dir), "--out", str(out), "--model", "test-model"],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    return out


def test_extract_then_experiment(tmp_path):
    data_dir = tmp_path / "cifar"
    data_dir.mkdir()
    train_labels = np.tile(np.arange(10), 24)  # 240 rows over 10 classes
    test_labels = np.tile(np.arange(10), 10)
    per_batch = np.array_split(train_labels, 5)
    for i, chunk in enumerate(per_batch, start=1):
        write_batch(data_dir / f"data_batch_{i}.bin", chunk)
    write_batch(data_dir / "test_batch.bin", test_labels)

    train_out = run_extract(data_dir, "train", tmp_path / "train.pndf")
    test_out = run_extract(data_dir, "test", tmp_path / "test.pndf")

    train = load_feature_file(train_out)
    test = load_feature_file(test_out)
    assert train.n == 240 and test.n == 100
    assert train.d == test.d
    assert sorted(np.unique(train.labels)) == list(range(10))

    # brightness-separated classes: raw kNN should rank anomalies highly
    rep = run_one_class_experiment(train, test, 0, ExperimentConfig(variant="unadapted", seed=0))
    assert rep.auc > 0.9
    rep9 = run_one_class_experiment(train, test, 9, ExperimentConfig(variant="unadapted", seed=9))
    assert rep9.auc > 0.9
