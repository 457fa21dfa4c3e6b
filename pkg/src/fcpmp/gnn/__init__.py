from .enhancer import NodeAttr, Refinement, enhance, enhance_backward, enhance_batch, identity_weights
from .mlp import (
    DEFAULT_SPECS,
    MlpSpec,
    WeightFileError,
    WeightStore,
    init_weights,
    load_weights,
    mlp_backward,
    mlp_forward,
    save_weights,
)
from .train import Adam, TrainHyper, TrainingDiverged, final_iteration_loss, learning_rate, loss_and_grad, train

__all__ = [
    "DEFAULT_SPECS",
    "Adam",
    "MlpSpec",
    "NodeAttr",
    "Refinement",
    "TrainHyper",
    "TrainingDiverged",
    "WeightFileError",
    "WeightStore",
    "enhance",
    "enhance_backward",
    "enhance_batch",
    "final_iteration_loss",
    "identity_weights",
    "init_weights",
    "learning_rate",
    "load_weights",
    "loss_and_grad",
    "mlp_backward",
    "mlp_forward",
    "save_weights",
    "train",
]
