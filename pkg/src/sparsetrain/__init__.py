"""Truly sparse MLP training with SET evolution, importance pruning and
WASAP parallel training."""

from ._kernels import BACKEND
from .errors import (
    CheckpointError,
    DataError,
    DeadlockError,
    ProtocolError,
    ShapeError,
    SparseTrainError,
    StaleError,
    StructuralEditError,
)
from .nn import NetworkConfig, SparseNetwork, backward, evaluate, forward
from .sparse import GradientUpdate, SparseWeights
from .topology import EvolutionConfig, average_models, er_init, importance_prune, set_evolve
from .train import OptimizerState, TrainReport, sgd_momentum_step, train_sequential

__version__ = "0.1.0"
