"""scikit-learn style wrapper: ``fit`` on clean images, ``transform`` noisy ones."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .metrics import psnr
from .synthdata import sample_patch_pairs, stack_pairs, texture_bank
from .trainer import Trainer, build_models
from .cli import DEFAULT_PEAK_HU, enhance_blended


def _check_images(X, name: str = "X") -> np.ndarray:
    """Accept [H, W] or [N, H, W] finite float images; always return [N, H, W] float64."""
    arr = np.asarray(X)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be an image [H, W] or a stack [N, H, W], got shape {arr.shape}")
    return check_array(arr, allow_nd=True, dtype=np.float64, ensure_all_finite=True, input_name=name)


class TextureMatchingEnhancer(BaseEstimator, TransformerMixin):
    """CT enhancer trained with a texture-matching adversarial loss.

    ``fit`` simulates noisy pairs from clean images with the configured noise
    model and trains the generator (plus the lambda=0 companion when
    ``eta < 1``); ``transform`` enhances noisy images.

    Parameters mirror :class:`RunConfig` fields; ``eta=None`` takes the preset value.
    Defaults are desk-scale settings (small network, few thousand updates);
    lambda is large because the fidelity term sums over every patch pixel.
    """

    def __init__(self, preset: str = "denoise", lambda_: float = 100.0, sigma_hu: float = 50.0,
                 alpha: Optional[float] = None, eta: Optional[float] = None, n_updates: int = 2000,
                 batch_size: int = 8, lr_gen: float = 1e-3, lr_disc: float = 1e-4, gen_depth: int = 7,
                 gen_width: int = 16, noise_std_hu: float = 70.0, noise_kind: str = "white",
                 target_std_hu: float = 30.0, target_kind: str = "bandpass", target_cutoff: float = 0.2,
                 patch_size: int = 32, pairs_per_image: int = 64, gamma_learnable: bool = False, seed: int = 0,
                 precision: str = "train32"):
        self.preset = preset
        self.lambda_ = lambda_
        self.sigma_hu = sigma_hu
        self.alpha = alpha
        self.eta = eta
        self.n_updates = n_updates
        self.batch_size = batch_size
        self.lr_gen = lr_gen
        self.lr_disc = lr_disc
        self.gen_depth = gen_depth
        self.gen_width = gen_width
        self.noise_std_hu = noise_std_hu
        self.noise_kind = noise_kind
        self.target_std_hu = target_std_hu
        self.target_kind = target_kind
        self.target_cutoff = target_cutoff
        self.patch_size = patch_size
        self.pairs_per_image = pairs_per_image
        self.gamma_learnable = gamma_learnable
        self.seed = seed
        self.precision = precision

    def _config(self) -> RunConfig:
        params = self.get_params()
        preset = params.pop("preset")
        params["pairs_per_phantom"] = params.pop("pairs_per_image")
        return RunConfig.for_preset(preset, **{k: v for k, v in params.items() if v is not None})

    def fit(self, X, y=None):
        X = _check_images(X)
        cfg = self._config()
        pairs = sample_patch_pairs(X, cfg.patch_size, cfg.pairs_per_phantom, cfg.seed, cfg.noise_spec(),
                                   cfg.deformation(), cfg.spacing)
        data = stack_pairs(pairs)
        bank = texture_bank(cfg.target_spec(), cfg.target_bank_size, cfg.patch_size, cfg.seed)
        self.config_ = cfg
        self.generator_, self.gamma_, self.discriminator_, self.log_ = self._train(cfg, data, bank)
        self.br_generator_ = self.br_log_ = None
        if cfg.eta < 1.0:
            br_cfg = cfg.replace(lambda_=0.0)
            self.br_generator_, _, _, self.br_log_ = self._train(br_cfg, data, None)
        self.n_training_pairs_ = len(pairs)
        return self

    @staticmethod
    def _train(cfg: RunConfig, data, bank):
        gen, gamma, disc = build_models(cfg)
        trainer = Trainer(cfg.train_config(), gen, gamma, disc, bank if cfg.lambda_ > 0 else None)
        return gen, gamma, disc, trainer.run(*data)

    def transform(self, X):
        check_is_fitted(self, "generator_")
        X = _check_images(X)
        return enhance_blended(self.generator_, self.br_generator_, self.config_.eta, X)

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean PSNR (dB) of the enhanced ``X`` against clean ``y``."""
        out = self.transform(X)
        y = _check_images(y, "y")
        if out.shape != y.shape:
            raise ValueError(f"X and y shapes differ: {out.shape} vs {y.shape}")
        return float(np.mean([psnr(a, b, DEFAULT_PEAK_HU) for a, b in zip(out, y)]))
