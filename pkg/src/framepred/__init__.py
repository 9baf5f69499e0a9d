"""Stochastic future-frame prediction pre-training with an auxiliary
masked-autoencoding objective through a shared decoder, evaluated with k-NN
video label propagation on synthetic stochastic videos."""

from .model import ModelConfig, StochasticFramePredictor, build_model
from .propagation import PropagationConfig, propagate, region_jaccard
from .trainer import TrainConfig, Trainer, train
from .videodata import GeneratorSpec, generate_synthetic_dataset

__all__ = [
    "ModelConfig",
    "StochasticFramePredictor",
    "build_model",
    "PropagationConfig",
    "propagate",
    "region_jaccard",
    "TrainConfig",
    "Trainer",
    "train",
    "GeneratorSpec",
    "generate_synthetic_dataset",
]

__version__ = "0.1.0"
