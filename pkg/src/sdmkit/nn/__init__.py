"""Minimal dense/convolutional network engine with reverse-mode gradients."""

from sdmkit.nn.layers import (BatchNorm, Conv3x3, Dense, Dropout, GlobalAvgPool, Layer, MaxPool2, ReLU,
                              ShapeError, softmax, softmax_cross_entropy)
from sdmkit.nn.network import Network, Sequential
from sdmkit.nn.optim import NonFiniteGradient, SGDMomentum

__all__ = ["BatchNorm", "Conv3x3", "Dense", "Dropout", "GlobalAvgPool", "Layer", "MaxPool2", "ReLU",
           "ShapeError", "softmax", "softmax_cross_entropy", "Network", "Sequential",
           "NonFiniteGradient", "SGDMomentum"]
