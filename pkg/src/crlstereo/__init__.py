"""Two-stage cascade residual stereo matching on a small numpy autodiff engine."""

from .data_io import StereoSample, generate_stereogram, read_disparity, synthesize_dataset, write_disparity
from .metrics import epe, three_pixel_error
from .networks import CRLConfig, CRLModel, forward_crl, load_checkpoint, predict, save_checkpoint
from .sgm import SgmParams, run_sgm
from .stereo_ops import DisparityMap, correlation1d, warp
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "CRLConfig",
    "CRLModel",
    "DisparityMap",
    "SgmParams",
    "StereoSample",
    "Tensor",
    "backward",
    "correlation1d",
    "epe",
    "forward_crl",
    "generate_stereogram",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "predict",
    "read_disparity",
    "run_sgm",
    "save_checkpoint",
    "synthesize_dataset",
    "three_pixel_error",
    "warp",
    "write_disparity",
]
