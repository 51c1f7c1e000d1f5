"""Texture-matching GAN (TMGAN) for CT image enhancement, on a small numpy autodiff engine."""

from .config import PRESETS, RunConfig, TrainConfig
from .inference import blend, enhance
from .losses import LossConfig, discriminator_loss, generator_loss, texture_difference
from .metrics import estimate_bias, nps_distance, nps_radial, psnr, ssim, theorem1_check
from .models import DiscriminatorParams, GammaParam, GeneratorParams, discriminator_forward, generator_forward
from .trainer import Trainer, TrainingLog, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "RunConfig", "TrainConfig", "LossConfig", "GeneratorParams", "DiscriminatorParams", "GammaParam",
    "generator_forward", "discriminator_forward", "texture_difference", "discriminator_loss", "generator_loss",
    "Trainer", "TrainingLog", "train", "save_checkpoint", "load_checkpoint", "enhance", "blend", "psnr", "ssim",
    "nps_radial", "nps_distance", "estimate_bias", "theorem1_check", "TextureMatchingEnhancer",
]


def __getattr__(name):
    # sklearn is only needed for the estimator wrapper
    if name == "TextureMatchingEnhancer":
        from .estimator import TextureMatchingEnhancer
        return TextureMatchingEnhancer
    raise AttributeError(name)
