"""Ground-truth-free quality and hallucination assessment for virtual
tissue staining, rebuilt at desk scale on fully synthetic data."""

from .calibrate import (
    CalibrationResult,
    ModelVerdict,
    assess_model,
    calibrate_alpha,
    calibrate_beta,
    resampling_study,
)
from .cycle import CycleSeq, drift_profile, run_cycles, run_cycles_stack
from .ensemble import (
    Backbone,
    CycleEnsembleClassifier,
    ScoreRecord,
    VotingHead,
    classify,
    pretrain_backbone,
    score_features,
    train_heads,
)
from .metrics import (
    SeparationReport,
    auc,
    confusion,
    count_nuclei,
    kl_divergence,
    mse,
    pcc,
    psnr,
    welch_t,
)
from .patches import Patch
from .scoring import StainedImageScorer
from .synth import (
    DatasetConfig,
    DatasetManifest,
    TileStore,
    TissueSpec,
    build_dataset,
    corrupt_hs,
    generate_pair,
    render_tile,
)
from .translate import Checkpoint, StainTranslator, label_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "CalibrationResult",
    "Checkpoint",
    "CycleEnsembleClassifier",
    "CycleSeq",
    "DatasetConfig",
    "DatasetManifest",
    "ModelVerdict",
    "Patch",
    "ScoreRecord",
    "SeparationReport",
    "StainedImageScorer",
    "StainTranslator",
    "TileStore",
    "TissueSpec",
    "VotingHead",
    "assess_model",
    "auc",
    "build_dataset",
    "calibrate_alpha",
    "calibrate_beta",
    "classify",
    "confusion",
    "corrupt_hs",
    "count_nuclei",
    "drift_profile",
    "generate_pair",
    "kl_divergence",
    "label_checkpoint",
    "mse",
    "pcc",
    "pretrain_backbone",
    "psnr",
    "render_tile",
    "resampling_study",
    "run_cycles",
    "run_cycles_stack",
    "score_features",
    "train_heads",
    "welch_t",
]
