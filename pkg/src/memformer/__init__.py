"""Memory-augmented linear transformers that learn first-order optimizers in context."""
from . import ad, baselines, kernels, model, tasks, trainer
from .model import Model, ModelConfig, LayerParams, forward, init_model
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ad", "baselines", "kernels", "model", "tasks", "trainer",
    "Model", "ModelConfig", "LayerParams", "forward", "init_model", "TrainConfig", "train",
]
