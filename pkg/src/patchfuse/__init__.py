"""patchfuse: patch-level classification and saliency-weighted fusion for WSIs."""

from patchfuse.cnn import (
    CnnConfig,
    CnnWsiClassifier,
    SaliencyMap,
    desk_cnn_config,
    load_saliency,
    save_saliency,
)
from patchfuse.config import RunConfig, load_run_config, parse_run_config
from patchfuse.evaluate import (
    CrossValidationResult,
    ExperimentConfig,
    FoldPlan,
    MetricsReport,
    confusion_metrics,
    cross_validate,
    flip_low_saliency,
    make_folds,
    train_cnn,
    train_vit,
)
from patchfuse.exceptions import (
    ConfigError,
    DimensionError,
    EmptyInputError,
    GeneratorSpecError,
    MissingArtifactError,
    NotRecordingError,
    StageError,
    UninitializedStatsError,
)
from patchfuse.fusion import (
    FusionConfig,
    FusionResult,
    PatchVerdict,
    fuse,
    fusion_report,
    majority_vote,
    patch_saliency_score,
)
from patchfuse.synthetic import (
    DatasetManifest,
    GeneratorSpec,
    Lesion,
    generate_dataset,
    load_dataset,
    reduced_preset,
)
from patchfuse.tiling import PATCH_SIZE, WsiSample, WsiTiler
from patchfuse.vit import VitConfig, VitPatchClassifier, desk_config

__version__ = "0.1.0"

__all__ = [
    "CnnConfig",
    "CnnWsiClassifier",
    "ConfigError",
    "CrossValidationResult",
    "DatasetManifest",
    "DimensionError",
    "EmptyInputError",
    "ExperimentConfig",
    "FoldPlan",
    "FusionConfig",
    "FusionResult",
    "GeneratorSpec",
    "GeneratorSpecError",
    "Lesion",
    "MetricsReport",
    "MissingArtifactError",
    "NotRecordingError",
    "PATCH_SIZE",
    "PatchVerdict",
    "RunConfig",
    "SaliencyMap",
    "StageError",
    "UninitializedStatsError",
    "VitConfig",
    "VitPatchClassifier",
    "WsiSample",
    "WsiTiler",
    "confusion_metrics",
    "cross_validate",
    "desk_cnn_config",
    "desk_config",
    "flip_low_saliency",
    "fuse",
    "fusion_report",
    "generate_dataset",
    "load_dataset",
    "load_run_config",
    "load_saliency",
    "majority_vote",
    "make_folds",
    "parse_run_config",
    "patch_saliency_score",
    "save_saliency",
    "train_cnn",
    "train_vit",
    "__version__",
]
