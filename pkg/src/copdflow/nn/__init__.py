"""Neural-network layers, losses, optimiser and checkpoint I/O."""

from .layers import (Activation, BatchNorm, Cache, Conv2D, Dense, Dropout, Flatten, Layer,
                     MaxPool2D, Reshape, TransposedConv2D, sigmoid)
from .losses import bce_with_logits, binary_cross_entropy, softmax, softmax_cross_entropy
from .model import Sequential
from .optim import AdamState, adam_step

__all__ = [
    "Activation", "AdamState", "BatchNorm", "Cache", "Conv2D", "Dense", "Dropout", "Flatten",
    "Layer", "MaxPool2D", "Reshape", "Sequential", "TransposedConv2D", "adam_step",
    "bce_with_logits", "binary_cross_entropy", "sigmoid", "softmax", "softmax_cross_entropy",
]
