"""Minimal numpy network core: layers with explicit backward, losses, SGD."""
from .functional import ShapeError
from .layers import BatchNorm, Conv2d, Dense, GlobalAvgPool, Layer, Parameter, ReLU, Sequential
from .losses import l2_loss, softmax, softmax_cross_entropy
from .optim import SgdConfig, learning_rate, sgd_step

__all__ = [
    "BatchNorm", "Conv2d", "Dense", "GlobalAvgPool", "Layer", "Parameter", "ReLU", "Sequential",
    "ShapeError", "SgdConfig", "l2_loss", "learning_rate", "sgd_step", "softmax",
    "softmax_cross_entropy",
]
