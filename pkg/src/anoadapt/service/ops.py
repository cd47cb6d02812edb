"""File-level orchestration behind the service endpoints.

Paths are interpreted on the host running the engine. Artifacts never embed
timestamps, so identical requests with identical seeds rewrite identical
bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..adapter import (
    Checkpoint,
    ClassifierHead,
    OptState,
    default_widths,
    forward,
    init_adapter,
    init_head,
    load_checkpoint,
    pretrain_classifier,
    save_checkpoint,
    snapshot,
)
from ..benchmark import BenchmarkConfig, run_acceptance_suite
from ..errors import TrainingAbortedError, ValidationError
from ..evaluation import SyntheticSpec, make_synthetic, roc_auc
from ..feature_store import FeatureMatrix, load_feature_csv, load_feature_file, save_feature_file
from ..objectives import AdaptConfig, OEHead, fisher_diagonal, oe_score
from ..scoring import (
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
from ..trainer import (
    EWC_MINIBATCHES,
    FIXED_STOP_MINIBATCHES,
    CheckpointBank,
    TrainConfig,
    adapt,
    train_jo,
    train_oe,
)
from . import schemas

ADAPT_MODES = ("ewc", "unregularized", "l2-uniform", "jo", "oe")
SCORERS = ("center", "knn", "kmeans", "ses", "oe-logit")
BANK_META = "bank.json"


def _load_features(path: str) -> FeatureMatrix:
    if not os.path.exists(path):
        raise FileNotFoundError(f"feature file not found: {path}")
    if path.endswith(".csv"):
        return load_feature_csv(path)
    return load_feature_file(path)


def _write_scores_csv(path: str, scores: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,score\n")
        for i, s in enumerate(scores):
            fh.write(f"{i},{float(s)!r}\n")


def _read_indexed_csv(path: str, value_column: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if len(header) != 2 or header[0] != "index" or header[1] != value_column:
            raise ValidationError(f"{path}: expected header 'index,{value_column}', got {header}")
        idx, values = [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            a, b = line.split(",")
            idx.append(int(a))
            values.append(float(b))
    if not values:
        raise ValidationError(f"{path}: no data rows")
    return np.asarray(idx), np.asarray(values)


def run_pretrain(req: schemas.PretrainRequest) -> schemas.PretrainResponse:
    aux = _load_features(req.aux_path)
    if aux.labels is None:
        raise ValidationError(f"{req.aux_path}: pretraining needs a labeled feature file")
    widths = default_widths(aux.d, req.hidden_layers)
    psi0 = init_adapter(widths, seed=req.seed)
    num_classes = int(aux.labels.max()) + 1
    head = init_head(num_classes, widths[-1], seed=req.seed + 1)
    opt = OptState(req.lr, req.momentum, req.weight_decay, req.clip)
    pretrain_classifier(psi0, head, aux, opt, req.minibatches, req.batch_size, seed=req.seed + 2)
    F = fisher_diagonal(psi0, head, aux, req.fisher_minibatches, req.batch_size, seed=req.seed + 4)

    save_checkpoint(snapshot(psi0, 0), req.psi0_out)
    save_feature_file(FeatureMatrix(F[None, :]), req.fisher_out)
    head_path = req.head_out or req.psi0_out + ".head"
    head_ckpt = Checkpoint(
        params=_head_as_params(head), minibatch_index=0
    )
    save_checkpoint(head_ckpt, head_path)
    return schemas.PretrainResponse(
        psi0_path=req.psi0_out,
        fisher_path=req.fisher_out,
        head_path=head_path,
        num_params=psi0.num_params,
        num_classes=num_classes,
    )


def _head_as_params(head: ClassifierHead):
    from ..adapter import AdapterParams

    return AdapterParams([head.weight], [head.bias])


def _params_as_head(ckpt: Checkpoint) -> ClassifierHead:
    return ClassifierHead(ckpt.params.weights[0], ckpt.params.biases[0])


def _train_config(req: schemas.AdaptRequest, mode: str, total: int) -> TrainConfig:
    return TrainConfig(
        adapt=AdaptConfig(lam=req.lam, alpha=req.alpha, mode=mode),
        learning_rate=req.lr,
        momentum=req.momentum,
        weight_decay=req.weight_decay,
        clip_norm=req.clip,
        total_minibatches=total,
        batch_size=req.batch_size,
        checkpoint_interval=req.ckpt_interval,
        ses_sample_cap=req.ses_sample_cap,
        seed=req.seed,
    )


def _write_bank(bank_dir: str, bank: CheckpointBank) -> list[str]:
    Path(bank_dir).mkdir(parents=True, exist_ok=True)
    files = []
    for ckpt in bank.checkpoints:
        path = os.path.join(bank_dir, f"ckpt-{ckpt.minibatch_index:07d}.pndc")
        save_checkpoint(ckpt, path)
        files.append(path)
    with open(os.path.join(bank_dir, BANK_META), "w", encoding="utf-8") as fh:
        json.dump(
            {"interval": bank.interval, "batch_size": bank.batch_size, "ses_sample_cap": bank.ses_sample_cap},
            fh,
            sort_keys=True,
        )
        fh.write("\n")
    return files


def _load_bank(bank_dir: str) -> CheckpointBank:
    paths = sorted(Path(bank_dir).glob("ckpt-*.pndc"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints found in {bank_dir}")
    checkpoints = [load_checkpoint(p) for p in paths]
    meta_path = os.path.join(bank_dir, BANK_META)
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    return CheckpointBank(
        checkpoints=checkpoints,
        interval=int(meta.get("interval", 1)),
        batch_size=int(meta.get("batch_size", 32)),
        ses_sample_cap=int(meta.get("ses_sample_cap", 150_000)),
    )


def run_adapt(req: schemas.AdaptRequest) -> schemas.AdaptResponse:
    if req.mode not in ADAPT_MODES:
        raise ValidationError(f"mode must be one of {ADAPT_MODES}, got {req.mode!r}")
    train = _load_features(req.train_path)
    psi0 = load_checkpoint(req.psi0_path).params
    total = req.minibatches
    if total is None:
        total = FIXED_STOP_MINIBATCHES if req.mode == "unregularized" else EWC_MINIBATCHES
    Path(req.bank_dir).mkdir(parents=True, exist_ok=True)

    if req.mode == "jo":
        if req.aux_path is None or req.head_path is None:
            raise ValidationError("mode 'jo' needs aux_path and head_path")
        aux = _load_features(req.aux_path)
        head = _params_as_head(load_checkpoint(req.head_path))
        psi = train_jo(psi0, head, aux, train, _train_config(req, "ewc", total))
        final = os.path.join(req.bank_dir, "final.pndc")
        save_checkpoint(snapshot(psi, total), final)
        return schemas.AdaptResponse(
            bank_dir=req.bank_dir, checkpoint_files=[final], final_params_path=final, minibatches_run=total
        )

    if req.mode == "oe":
        if req.oe_path is None:
            raise ValidationError("mode 'oe' needs oe_path")
        oe = _load_features(req.oe_path)
        rng = np.random.default_rng(req.seed + 3)
        head0 = OEHead(rng.normal(0.0, 0.01, size=psi0.output_dim), 0.0)
        psi, oe_head = train_oe(psi0, head0, train, oe, _train_config(req, "ewc", total))
        final = os.path.join(req.bank_dir, "final.pndc")
        save_checkpoint(snapshot(psi, total), final)
        head_path = os.path.join(req.bank_dir, "oe_head.pndc")
        from ..adapter import AdapterParams

        save_checkpoint(Checkpoint(AdapterParams([oe_head.w[None, :]], [np.array([oe_head.b])]), total), head_path)
        return schemas.AdaptResponse(
            bank_dir=req.bank_dir,
            checkpoint_files=[final],
            final_params_path=final,
            oe_head_path=head_path,
            minibatches_run=total,
        )

    if req.mode == "ewc":
        if req.fisher_path is None:
            raise ValidationError("mode 'ewc' needs fisher_path")
        F = _load_features(req.fisher_path).values()[0]
    else:
        F = np.ones(psi0.num_params)

    aborted = False
    try:
        psi, bank, run = adapt(psi0, train, F, _train_config(req, req.mode, total))
    except TrainingAbortedError as err:
        psi, bank, run = err.params, err.bank, err.run
        aborted = True
    files = _write_bank(req.bank_dir, bank)
    final = os.path.join(req.bank_dir, "final.pndc")
    save_checkpoint(snapshot(psi, len(run.loss_trace)), final)
    trace_path = req.trace_path
    if trace_path is None:
        trace_path = os.path.join(req.bank_dir, "trace.csv")
    run.write_trace_csv(trace_path)
    return schemas.AdaptResponse(
        bank_dir=req.bank_dir,
        checkpoint_files=files,
        final_params_path=final,
        trace_path=trace_path,
        minibatches_run=len(run.loss_trace),
        final_loss=run.loss_trace[-1] if run.loss_trace else None,
        aborted=aborted,
    )


def run_score(req: schemas.ScoreRequest) -> schemas.ScoreResponse:
    if req.scorer not in SCORERS:
        raise ValidationError(f"scorer must be one of {SCORERS}, got {req.scorer!r}")
    gallery_m = _load_features(req.gallery_path)
    query_m = _load_features(req.query_path)

    if req.scorer == "ses":
        if req.bank_dir is None:
            raise ValidationError("scorer 'ses' needs bank_dir")
        bank = _load_bank(req.bank_dir)
        attach_normalizers(bank, gallery_m, val_fraction=req.val_fraction, k=req.k, seed=req.seed)
        for ckpt in bank.checkpoints:
            save_checkpoint(ckpt, os.path.join(req.bank_dir, f"ckpt-{ckpt.minibatch_index:07d}.pndc"))
        scores = ses_score(bank, gallery_m, query_m, req.k)
        _write_scores_csv(req.out_path, scores)
        return schemas.ScoreResponse(out_path=req.out_path, n_scores=len(scores))

    if req.scorer == "oe-logit":
        if req.ckpt_path is None or req.oe_head_path is None:
            raise ValidationError("scorer 'oe-logit' needs ckpt_path and oe_head_path")
        psi = load_checkpoint(req.ckpt_path).params
        head_ckpt = load_checkpoint(req.oe_head_path)
        head = OEHead(head_ckpt.params.weights[0][0], float(head_ckpt.params.biases[0][0]))
        scores = oe_score(psi, head, query_m)
        _write_scores_csv(req.out_path, scores)
        return schemas.ScoreResponse(out_path=req.out_path, n_scores=len(scores))

    gallery = gallery_m.values()
    queries = query_m.values()
    if req.ckpt_path is not None:
        psi = load_checkpoint(req.ckpt_path).params
        gallery = forward(psi, gallery)
        queries = forward(psi, queries)
    if req.whiten:
        transform = whitening_fit(gallery)
        gallery = whitening_apply(transform, gallery)
        queries = whitening_apply(transform, queries)

    if req.scorer == "knn":
        scores = knn_score(Gallery(gallery), queries, req.k)
    elif req.scorer == "center":
        scores = center_distance_score(gallery.mean(axis=0), queries)
    else:
        scores = kmeans_score(kmeans_fit(Gallery(gallery), req.means, seed=req.seed), queries)
    _write_scores_csv(req.out_path, scores)
    return schemas.ScoreResponse(out_path=req.out_path, n_scores=len(scores))


def run_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    s_idx, scores = _read_indexed_csv(req.scores_path, "score")
    l_idx, labels = _read_indexed_csv(req.labels_path, "label")
    if len(s_idx) != len(l_idx) or not np.array_equal(s_idx, l_idx):
        raise ValidationError("score and label files cover different indices")
    labels = labels.astype(np.int64)
    auc = roc_auc(scores, labels)
    if req.report_out:
        with open(req.report_out, "w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            fh.write(f"auc,{auc!r}\n")
            fh.write(f"n,{len(scores)}\n")
            fh.write(f"n_anomalous,{int(labels.sum())}\n")
    return schemas.EvalResponse(auc=auc, n=len(scores), n_anomalous=int(labels.sum()))


def run_synth(req: schemas.SynthRequest) -> schemas.SynthResponse:
    spec = SyntheticSpec(seed=req.seed, collapse_prone=req.collapse_prone)
    train, test, aux = make_synthetic(spec)
    save_feature_file(train, req.out_train)
    save_feature_file(test, req.out_test)
    save_feature_file(aux, req.out_aux)
    return schemas.SynthResponse(
        train_path=req.out_train,
        test_path=req.out_test,
        aux_path=req.out_aux,
        n_train=train.n,
        n_test=test.n,
        n_aux=aux.n,
    )


def run_experiment(req: schemas.ExperimentRequest) -> schemas.ExperimentResponse:
    from concurrent.futures import ThreadPoolExecutor

    from ..evaluation import ExperimentConfig, report as build_report, run_one_class_experiment

    train = _load_features(req.train_path)
    test = _load_features(req.test_path)
    if train.labels is None or test.labels is None:
        raise ValidationError("experiment runs need labeled train and test files")
    classes = req.classes if req.classes is not None else [int(c) for c in np.unique(train.labels)]
    oe = _load_features(req.oe_path) if req.oe_path else None
    total = req.minibatches
    if total is None:
        total = FIXED_STOP_MINIBATCHES if req.variant in ("fixed-stop", "unregularized") else EWC_MINIBATCHES

    def one(cls: int):
        cfg = ExperimentConfig(
            variant=req.variant,
            scorer=req.scorer,
            k=req.k,
            means=req.means,
            seed=req.seed + cls,
            hidden_layers=req.hidden_layers,
            pretrain_minibatches=req.pretrain_minibatches,
            fisher_minibatches=req.fisher_minibatches,
            train_cfg=TrainConfig(
                adapt=AdaptConfig(lam=req.lam, alpha=req.alpha),
                learning_rate=req.lr,
                total_minibatches=total,
                seed=req.seed + cls,
            ),
            oe=oe,
        )
        return run_one_class_experiment(train, test, cls, cfg)

    if req.jobs > 1:
        with ThreadPoolExecutor(max_workers=req.jobs) as pool:
            reports = list(pool.map(one, classes))
    else:
        reports = [one(cls) for cls in classes]

    csv_text, table = build_report(reports)
    if req.report_out:
        with open(req.report_out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    return schemas.ExperimentResponse(
        variant=req.variant,
        per_class=[
            schemas.ClassResult(normal_class=r.metadata["normal_class"], auc=r.auc) for r in reports
        ],
        average_auc=float(np.mean([r.auc for r in reports])),
        report_path=req.report_out,
        table=table,
    )


def run_bench() -> schemas.BenchResponse:
    results = run_acceptance_suite(BenchmarkConfig())
    return schemas.BenchResponse(
        criteria=[
            schemas.CriterionReport(name=r.name, passed=r.passed, detail=r.detail, elapsed_s=r.elapsed_s)
            for r in results
        ],
        all_passed=all(r.passed for r in results),
    )
