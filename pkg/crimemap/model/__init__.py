"""Small convolutional classifier: layers, training, transfer, and model files."""

from .arch import PRESETS, ArchSpec, preset
from .gradcheck import GradientCheck, check_gradients, check_layer_gradients
from .layers import Conv, Dense, Flatten, Layer, MaxPool, ReLU, SoftmaxOutput
from .network import (
    classify,
    forward,
    init_params,
    loss_and_gradients,
    predict,
    replace_head,
)
from .params import ModelParams
from .serialization import load_params, save_params
from .training import LogRecord, TrainConfig, TrainingLog, evaluate, train

__all__ = [
    "PRESETS",
    "ArchSpec",
    "Conv",
    "Dense",
    "Flatten",
    "GradientCheck",
    "Layer",
    "LogRecord",
    "MaxPool",
    "ModelParams",
    "ReLU",
    "SoftmaxOutput",
    "TrainConfig",
    "TrainingLog",
    "check_gradients",
    "check_layer_gradients",
    "classify",
    "evaluate",
    "forward",
    "init_params",
    "load_params",
    "loss_and_gradients",
    "predict",
    "preset",
    "replace_head",
    "save_params",
    "train",
]
