"""Anomaly detection by compactness adaptation of pretrained features.

The engine pretrains a small adapter network on an auxiliary classification
task, adapts it to a normal-only target set under a compactness objective
with elastic regularization (or early stopping) to prevent feature collapse,
and scores anomalies with non-parametric density estimates.
"""

from .adapter import (
    AdapterParams,
    Checkpoint,
    ClassifierHead,
    OptState,
    backward,
    default_widths,
    forward,
    init_adapter,
    init_head,
    load_checkpoint,
    pretrain_classifier,
    save_checkpoint,
    sgd_step,
    snapshot,
)
from .errors import (
    CorruptionError,
    DegenerateNormalizerError,
    EngineError,
    FormatError,
    NumericError,
    TrainingAbortedError,
    ValidationError,
)
from .evaluation import (
    ExperimentConfig,
    ScoreReport,
    SyntheticSpec,
    make_synthetic,
    report,
    roc_auc,
    run_one_class_experiment,
)
from .feature_store import (
    DatasetSplit,
    FeatureMatrix,
    load_feature_csv,
    load_feature_file,
    one_class_split,
    save_feature_csv,
    save_feature_file,
    split_train_val,
)
from .objectives import (
    AdaptConfig,
    OEHead,
    center_init,
    compactness_loss,
    ewc_penalty,
    fisher_diagonal,
    joint_loss,
    oe_loss,
    oe_score,
)
from .scoring import (
    Gallery,
    KMeansModel,
    WhiteningTransform,
    attach_normalizers,
    center_distance_score,
    checkpoint_normalizer,
    kmeans_fit,
    kmeans_score,
    knn_score,
    ses_score,
    whitening_apply,
    whitening_fit,
)
from .trainer import CheckpointBank, TrainConfig, TrainRun, adapt, oe_config, train_jo, train_oe

__version__ = "0.1.0"
