"""Request/response models for the engine service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class PretrainRequest(BaseModel):
    aux_path: str
    psi0_out: str
    fisher_out: str
    head_out: str | None = None
    minibatches: int = Field(default=600, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    clip: float = Field(default=5.0, gt=0)
    hidden_layers: int = Field(default=2, ge=1)
    fisher_minibatches: int = Field(default=100, ge=1)
    seed: int = 0


class PretrainResponse(BaseModel):
    psi0_path: str
    fisher_path: str
    head_path: str
    num_params: int
    num_classes: int


class AdaptRequest(BaseModel):
    mode: str = "ewc"
    train_path: str
    psi0_path: str
    bank_dir: str
    fisher_path: str | None = None
    head_path: str | None = None  # jo mode
    aux_path: str | None = None  # jo mode
    oe_path: str | None = None  # oe mode
    trace_path: str | None = None
    lam: float = Field(default=1e4, ge=0, alias="lambda")
    alpha: float = Field(default=0.1, ge=0)
    minibatches: int | None = Field(default=None, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-5, ge=0)
    clip: float = Field(default=1e-3, gt=0)
    ckpt_interval: int | None = Field(default=None, ge=1)
    ses_sample_cap: int = Field(default=150_000, ge=1)
    seed: int = 0

    model_config = {"populate_by_name": True}


class AdaptResponse(BaseModel):
    bank_dir: str
    checkpoint_files: list[str]
    final_params_path: str
    oe_head_path: str | None = None
    trace_path: str | None = None
    minibatches_run: int
    final_loss: float | None = None
    aborted: bool = False


class ScoreRequest(BaseModel):
    scorer: str = "knn"
    gallery_path: str
    query_path: str
    out_path: str
    ckpt_path: str | None = None
    bank_dir: str | None = None
    oe_head_path: str | None = None
    k: int = Field(default=2, ge=1)
    means: int = Field(default=10, ge=1)
    whiten: bool = False
    val_fraction: float = Field(default=0.1, gt=0, lt=1)
    seed: int = 0


class ScoreResponse(BaseModel):
    out_path: str
    n_scores: int


class EvalRequest(BaseModel):
    scores_path: str
    labels_path: str
    report_out: str | None = None


class EvalResponse(BaseModel):
    auc: float
    n: int
    n_anomalous: int


class SynthRequest(BaseModel):
    out_train: str
    out_test: str
    out_aux: str
    seed: int = 0
    collapse_prone: bool = False


class SynthResponse(BaseModel):
    train_path: str
    test_path: str
    aux_path: str
    n_train: int
    n_test: int
    n_aux: int


class ExperimentRequest(BaseModel):
    train_path: str
    test_path: str
    variant: str = "unadapted"
    scorer: str = "knn"
    classes: list[int] | None = None  # default: every class in the train labels
    k: int = Field(default=2, ge=1)
    means: int = Field(default=10, ge=1)
    seed: int = 0
    hidden_layers: int = Field(default=2, ge=1)
    pretrain_minibatches: int = Field(default=600, ge=0)
    fisher_minibatches: int = Field(default=100, ge=1)
    lam: float = Field(default=1e4, ge=0, alias="lambda")
    alpha: float = Field(default=0.1, ge=0)
    minibatches: int | None = Field(default=None, ge=0)
    lr: float = Field(default=0.1, gt=0)
    oe_path: str | None = None
    jobs: int = Field(default=1, ge=1)
    report_out: str | None = None

    model_config = {"populate_by_name": True}


class ClassResult(BaseModel):
    normal_class: int
    auc: float


class ExperimentResponse(BaseModel):
    variant: str
    per_class: list[ClassResult]
    average_auc: float
    report_path: str | None = None
    table: str


class CriterionReport(BaseModel):
    name: str
    passed: bool
    detail: str
    elapsed_s: float


class BenchResponse(BaseModel):
    criteria: list[CriterionReport]
    all_passed: bool
