"""Lightweight U-shaped single-image motion deblurring network in numpy."""
from .network import NetworkConfig, RTFocuser, build, count_macs, count_params, forward, infer
from .training import TrainConfig, train_loop

__all__ = [
    "NetworkConfig",
    "RTFocuser",
    "TrainConfig",
    "build",
    "count_macs",
    "count_params",
    "forward",
    "infer",
    "train_loop",
]
__version__ = "0.1.0"
