"""Multi-margin metric learning for two-modality tracking, in plain numpy.

The package trains a pair of small embedding networks, one per modality,
so that distances to an anchor land inside planned bands: confusing
positives just inside a boundary alpha, confusing negatives just outside
alpha + m, and cross-modality comparisons separated by delta. A gated
fusion head and a tiny classifier turn the same features into a
candidate scorer for a toy tracking loop on synthetic sequences.
"""

from __future__ import annotations

from .embedding import FeedForwardNet, NetSpec, default_embed_spec, embed, init_classifier, init_net
from .fusion import FusedFeature, FusionHead, fuse, fuse_batch, init_fusion_head
from .gradcheck import SuiteResult, run_all, run_suite
from .losses import (
    LossValue,
    band_loss_values,
    classification_loss,
    cross_modality_loss,
    lifted_struct_loss,
    mmsl_pair_loss,
    mmsl_set_losses,
    mmsl_total,
    npair_loss,
    triplet_loss,
)
from .metricspace import (
    CheckReport,
    ContractViolation,
    EvaluationError,
    GradTape,
    euclidean,
    euclidean_sq,
    finite_diff_check,
)
from .mining import LabeledEmbedding, MarginParams, MinedSets, mine, mine_from_distances
from .synthdata import (
    Box,
    DatasetConfig,
    Frame,
    OracleParams,
    Proposal,
    SequenceConfig,
    feature_oracle,
    gen_sequence,
    generate_dataset,
    iou,
    read_dataset,
    sample_proposals,
    write_dataset,
)
from .trainer import Models, TrainConfig, TrainHistory, init_models, load_models, save_models, train
from .evaluation import (
    StructureReport,
    confuser_rich_dataset_config,
    precision_rate,
    run_ablation,
    run_experiment,
    run_margin_sweep,
    structure_report,
    success_rate,
    track_sequence,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CheckReport",
    "ContractViolation",
    "DatasetConfig",
    "EvaluationError",
    "FeedForwardNet",
    "Frame",
    "FusedFeature",
    "FusionHead",
    "GradTape",
    "LabeledEmbedding",
    "LossValue",
    "MarginParams",
    "MinedSets",
    "Models",
    "NetSpec",
    "OracleParams",
    "Proposal",
    "SequenceConfig",
    "StructureReport",
    "SuiteResult",
    "TrainConfig",
    "TrainHistory",
    "band_loss_values",
    "classification_loss",
    "confuser_rich_dataset_config",
    "cross_modality_loss",
    "default_embed_spec",
    "embed",
    "euclidean",
    "euclidean_sq",
    "feature_oracle",
    "finite_diff_check",
    "fuse",
    "fuse_batch",
    "gen_sequence",
    "generate_dataset",
    "init_classifier",
    "init_fusion_head",
    "init_models",
    "init_net",
    "iou",
    "lifted_struct_loss",
    "load_models",
    "mine",
    "mine_from_distances",
    "mmsl_pair_loss",
    "mmsl_set_losses",
    "mmsl_total",
    "npair_loss",
    "precision_rate",
    "read_dataset",
    "run_ablation",
    "run_all",
    "run_experiment",
    "run_margin_sweep",
    "run_suite",
    "sample_proposals",
    "save_models",
    "structure_report",
    "success_rate",
    "track_sequence",
    "train",
    "triplet_loss",
    "write_dataset",
]
