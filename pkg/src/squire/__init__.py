"""Sequence-to-sequence multi-hop reasoning over knowledge graphs."""

from .kg import DataError, KnowledgeGraph, Triple, Vocabulary, load_dataset
from .model import ModelConfig, SquireModel
from .train import TrainConfig, run_training

__all__ = [
    "DataError",
    "KnowledgeGraph",
    "ModelConfig",
    "SquireModel",
    "TrainConfig",
    "Triple",
    "Vocabulary",
    "load_dataset",
    "run_training",
]
