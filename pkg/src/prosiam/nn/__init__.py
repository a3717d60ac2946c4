from .layers import (BatchNorm, Conv2d, Dense, Dropout, Flatten, GlobalTimeAvgPool,
                     HeteroFreqMaxPool, Layer, MaxPoolTime, Parameter, ReLU, Sequential)
from .losses import contrastive_loss, softmax_cross_entropy
from .optim import SGDMomentum

__all__ = [
    "BatchNorm", "Conv2d", "Dense", "Dropout", "Flatten", "GlobalTimeAvgPool",
    "HeteroFreqMaxPool", "Layer", "MaxPoolTime", "Parameter", "ReLU", "Sequential",
    "contrastive_loss", "softmax_cross_entropy", "SGDMomentum",
]
