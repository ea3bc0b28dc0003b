"""Training, evaluation, persistence and configuration."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_to_text, load_config, parse_assignments, parse_config_text
from .evaluate import EvalReport, average_precision, evaluate, load_model, predict
from .trainer import Adam, SampleSource, TrainingDiverged, build_targets, train

__all__ = [
    "Adam", "Checkpoint", "CheckpointError", "ConfigError", "EvalReport", "RunConfig", "SampleSource",
    "TrainingDiverged", "average_precision", "build_targets", "config_to_text", "evaluate", "load_checkpoint",
    "load_config", "load_model", "parse_assignments", "parse_config_text", "predict", "save_checkpoint", "train",
]
