"""Variational inference over the final-layer outputs of neural networks."""

from .config import TrainConfig, load_config
from .core import (
    CategoricalPrediction,
    RegressionHead,
    RegressionPrediction,
    VariationalOutput,
    ensemble_predict,
)
from .networks import Link, MlpSpec, Network, init_network
from .regularizers import (
    CollapsedMean,
    CollapsedMV,
    EBAll,
    EmpiricalBayes,
    MeanAll,
    MVAll,
    Naive,
    PriorSpec,
)
from .training import MemberModel, Trainer, train_ensemble

__all__ = [
    "CategoricalPrediction",
    "CollapsedMV",
    "CollapsedMean",
    "EBAll",
    "EmpiricalBayes",
    "Link",
    "MVAll",
    "MeanAll",
    "MemberModel",
    "MlpSpec",
    "Naive",
    "Network",
    "PriorSpec",
    "RegressionHead",
    "RegressionPrediction",
    "Trainer",
    "TrainConfig",
    "VariationalOutput",
    "ensemble_predict",
    "init_network",
    "load_config",
    "train_ensemble",
]
