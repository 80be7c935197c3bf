"""Streaming AIS vessel-behavior classification.

A from-scratch numpy sequence model (continuous point embedding, 1-D
convolutions, transformer encoder) over kinematic features, driven by a
change-point-triggered streaming pipeline with rule-based post-processing.
"""

from .changepoint import ChangePointDecision, ChangePointReason, CpdConfig, detect_changepoint
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .engine import Engine, MetricsSnapshot, serve_stream
from .features import FeatureConfig, build_features, haversine_m
from .ingest import AisMessage, format_record, normalize_message, parse_record
from .model import (
    ModelConfig,
    ModelWeights,
    backward,
    count_parameters,
    forward,
    init_weights,
    production_activity_config,
    production_entity_config,
    toy_config,
)
from .postprocess import (
    ClassificationEvent,
    GeoFenceSet,
    PostProcessConfig,
    apply_postprocess,
)
from .synth import Regime, RegimeSpec, generate_dataset, generate_track
from .taxonomy import ACTIVITY_CLASSES, ENTITY_CLASSES, EntityClass
from .trackstore import TrackStore, TrackWindow
from .training import TrainConfig, evaluate, train_and_select

__version__ = "0.1.0"

__all__ = [
    "ACTIVITY_CLASSES",
    "AisMessage",
    "ChangePointDecision",
    "ChangePointReason",
    "Checkpoint",
    "ClassificationEvent",
    "CpdConfig",
    "ENTITY_CLASSES",
    "Engine",
    "EntityClass",
    "FeatureConfig",
    "GeoFenceSet",
    "MetricsSnapshot",
    "ModelConfig",
    "ModelWeights",
    "PostProcessConfig",
    "Regime",
    "RegimeSpec",
    "TrackStore",
    "TrackWindow",
    "TrainConfig",
    "apply_postprocess",
    "backward",
    "build_features",
    "count_parameters",
    "detect_changepoint",
    "evaluate",
    "format_record",
    "forward",
    "generate_dataset",
    "generate_track",
    "haversine_m",
    "init_weights",
    "load_checkpoint",
    "normalize_message",
    "parse_record",
    "production_activity_config",
    "production_entity_config",
    "save_checkpoint",
    "serve_stream",
    "toy_config",
    "train_and_select",
]
