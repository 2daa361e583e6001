"""Unified human pose and trajectory forecasting with a small transformer."""

__version__ = "0.1.0"

from .data import MotionSequence, read_sequences, synth_generate, write_sequences
from .estimator import MotionForecaster
from .metrics import MetricReport, ade, ape, fde, jpe, wta_loss
from .model import ModelConfig, ProposalSet, init_params, model_forward, parameter_count
from .training import DatasetSpec, TrainConfig, evaluate, run_ablation, train

__all__ = [
    "MotionSequence",
    "read_sequences",
    "write_sequences",
    "synth_generate",
    "MotionForecaster",
    "MetricReport",
    "ade",
    "fde",
    "ape",
    "jpe",
    "wta_loss",
    "ModelConfig",
    "ProposalSet",
    "init_params",
    "model_forward",
    "parameter_count",
    "DatasetSpec",
    "TrainConfig",
    "train",
    "evaluate",
    "run_ablation",
]
