"""FPD-M-net: fingerprint denoising and inpainting on a small NumPy autodiff core."""
from .autodiff import Tensor, backward
from .data import DatasetManifest, DistortionConfig, degrade, generate_ridge_pattern, make_dataset, pad_edge, unpad, warp
from .imageio import load_image, save_image
from .metrics import LossConfig, MetricsReport, SsimConfig, combined_loss, ms_ssim, psnr, ssim
from .model import ModelConfig, Network, build, build_fpd_mnet, build_unet, param_count
from .training import (
    Checkpoint,
    TrainConfig,
    TrainLog,
    evaluate,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    sgd_nesterov_step,
    train,
)

__version__ = "0.1.0"
