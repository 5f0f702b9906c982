"""CTUN video super-resolution on a small numpy autograd core."""
from .data import (DegradationSpec, FrameSequence, bicubic_resize, degrade, gaussian_blur,
                   load_sequence, load_weights, rgb_to_y, save_sequence, save_weights)
from .errors import (CtunError, DTypeError, GradientError, SequenceError, ShapeError,
                     WeightFileError)
from .metrics import psnr, ssim, temporal_profile
from .model import CtunConfig, ParamStore, init_params, super_resolve_sequence, zero_params
from .profiler import ProfileReport, count_flops, profile_inference
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "CtunConfig", "CtunError", "DTypeError", "DegradationSpec", "FrameSequence", "GradientError",
    "ParamStore", "ProfileReport", "SequenceError", "ShapeError", "Tensor", "TrainConfig",
    "WeightFileError", "backward", "bicubic_resize", "count_flops", "degrade", "gaussian_blur",
    "init_params", "load_sequence", "load_weights", "no_grad", "profile_inference", "psnr",
    "rgb_to_y", "save_sequence", "save_weights", "ssim", "super_resolve_sequence",
    "temporal_profile", "train_loop", "zero_params",
]
