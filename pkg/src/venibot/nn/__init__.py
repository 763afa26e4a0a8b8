"""Minimal reverse-mode engine: NCHW numpy tensors, a layer DAG, losses,
Adam and a plateau scheduler."""

from .checkpoint import load, loads, save, dumps
from .counting import flops, macs, param_count
from .graph import ModelGraph, Node
from .layers import Add, BatchNorm, Concat, Conv, MaxPool, ReLU, Sigmoid, TransConv
from .losses import bce_loss, l2_loss
from .optim import AdamState, PlateauScheduler, adam_step, scheduler_step

__all__ = [
    "ModelGraph", "Node",
    "Conv", "TransConv", "BatchNorm", "ReLU", "Sigmoid", "Concat", "Add", "MaxPool",
    "bce_loss", "l2_loss",
    "AdamState", "PlateauScheduler", "adam_step", "scheduler_step",
    "param_count", "macs", "flops",
    "save", "load", "dumps", "loads",
]
