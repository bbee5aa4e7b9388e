"""A small numpy neural-network engine with exact backward passes."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (BatchNorm, Conv2D, Dense, DepthwiseConv2D, DualHead, GlobalAvgPool,
                     HardSwish, Layer, MaxPool, ReLU)
from .network import Network, adapt_network_stem, adapt_stem, build_ocularnet, quantize_fp16
from .optim import AdamState, ScheduleState, adam_step, scheduled_lr

__all__ = [
    "AdamState", "BatchNorm", "Checkpoint", "Conv2D", "Dense", "DepthwiseConv2D", "DualHead",
    "GlobalAvgPool", "HardSwish", "Layer", "MaxPool", "Network", "ReLU", "ScheduleState",
    "adam_step", "adapt_network_stem", "adapt_stem", "build_ocularnet", "load_checkpoint",
    "quantize_fp16", "save_checkpoint", "scheduled_lr",
]
