"""Dual-query referring segmentation for industrial anomalies."""

from .config import AblationFlags, TrainConfig
from .core import FeatureMap, GroupAssignment, Label, PredictionOutput, QueryState, Sample
from .data import GeneratorConfig, generate_dataset, generate_samples, load_dataset
from .harness import Checkpoint, evaluate, predict_one, run_ablation, train
from .metrics import EvalReport
from .model import DQFormer, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "Checkpoint",
    "DQFormer",
    "EvalReport",
    "FeatureMap",
    "GeneratorConfig",
    "GroupAssignment",
    "Label",
    "ModelConfig",
    "PredictionOutput",
    "QueryState",
    "Sample",
    "TrainConfig",
    "evaluate",
    "generate_dataset",
    "generate_samples",
    "load_dataset",
    "predict_one",
    "run_ablation",
    "train",
]
