"""Convolutional recurrent reconstruction of undersampled dynamic MR sequences.

Pure NumPy: convolutions, recurrences and their gradients are written out by
hand; FFTs, filtering and interpolation come from SciPy.
"""
from .kspace import data_consistency, fft2c, generate_mask, ifft2c, undersample
from .model import NetworkConfig, backward, checkpoint_load, checkpoint_save, count_parameters, forward, init_params

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig",
    "backward",
    "checkpoint_load",
    "checkpoint_save",
    "count_parameters",
    "data_consistency",
    "fft2c",
    "forward",
    "generate_mask",
    "ifft2c",
    "init_params",
    "undersample",
]
