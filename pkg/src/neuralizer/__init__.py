"""Context-conditioned multi-task image-to-image model on procedural phantoms."""

from . import augment, config, datagen, evaluate, losses, model, optim, tensor, train
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .episode import Episode, TaskKind

__all__ = [
    "augment",
    "config",
    "datagen",
    "evaluate",
    "losses",
    "model",
    "optim",
    "tensor",
    "train",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "Episode",
    "TaskKind",
]

__version__ = "0.1.0"
