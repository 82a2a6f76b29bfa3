"""From-scratch baselines, mini backbones, and ensembles for binary patch
classification, with the training recipe and metric suite to benchmark them.
"""

from .data import (
    LabeledDataset,
    SplitStats,
    augment_batch,
    batches,
    load_image_dir,
    load_pcam_h5,
    split,
    synth_center_blob,
)
from .ensemble import (
    VoteConfig,
    build_concat_ensemble,
    evaluate_ensemble,
    majority_vote,
)
from .errors import (
    DataLoadError,
    FormatError,
    HistobenchError,
    MetricUndefinedError,
    ParameterError,
    ShapeError,
    StateError,
    TrainingDivergedError,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    auc_roc,
    confusion,
    render_report,
    report_from_scores,
    summarize,
)
from .nn import (
    GraphBuilder,
    InceptionSpec,
    MiniInceptionConfig,
    MiniResNetConfig,
    Network,
    TrainState,
    build_backbone_with_head,
    build_conv_baseline,
    build_mlp_baseline,
    count_params,
    inception_block,
    load_checkpoint,
    residual_block,
    save_checkpoint,
)
from .optim import (
    AdamState,
    TrainHistory,
    TrainingConfig,
    adam_step,
    bce_loss,
    evaluate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ConfusionCounts",
    "DataLoadError",
    "FormatError",
    "GraphBuilder",
    "HistobenchError",
    "InceptionSpec",
    "LabeledDataset",
    "MetricUndefinedError",
    "MetricsReport",
    "MiniInceptionConfig",
    "MiniResNetConfig",
    "Network",
    "ParameterError",
    "ShapeError",
    "SplitStats",
    "StateError",
    "TrainHistory",
    "TrainState",
    "TrainingConfig",
    "TrainingDivergedError",
    "VoteConfig",
    "adam_step",
    "auc_roc",
    "augment_batch",
    "batches",
    "bce_loss",
    "build_backbone_with_head",
    "build_concat_ensemble",
    "build_conv_baseline",
    "build_mlp_baseline",
    "confusion",
    "count_params",
    "evaluate",
    "evaluate_ensemble",
    "inception_block",
    "load_checkpoint",
    "load_image_dir",
    "load_pcam_h5",
    "majority_vote",
    "render_report",
    "report_from_scores",
    "residual_block",
    "save_checkpoint",
    "split",
    "summarize",
    "synth_center_blob",
    "train",
]
