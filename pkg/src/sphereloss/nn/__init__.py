"""Minimal trainable network primitives and the SGD training loop."""

from .optim import LossStage, TrainConfig, sgd_step
from .primitives import (
    Module,
    Primitive,
    PrimitiveSpec,
    Sequential,
    primitive_backward,
    primitive_forward,
)
from .training import (
    Network,
    StepRecord,
    TrainHistory,
    accuracy,
    adversarial_gradient_probe,
    dense_embedding_net,
    linear_softmax_loss,
    train,
)

__all__ = [
    "LossStage",
    "Module",
    "Network",
    "Primitive",
    "PrimitiveSpec",
    "Sequential",
    "StepRecord",
    "TrainConfig",
    "TrainHistory",
    "accuracy",
    "adversarial_gradient_probe",
    "dense_embedding_net",
    "linear_softmax_loss",
    "primitive_backward",
    "primitive_forward",
    "sgd_step",
    "train",
]
