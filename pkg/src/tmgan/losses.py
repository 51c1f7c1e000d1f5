"""Texture differences and the discriminator / generator objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .models import DiscriminatorParams, GammaParam, GeneratorParams, discriminator_forward, siamese_forward
from .tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = 0.0
    sigma_hu: float = 50.0
    alpha: float = 0.5
    adversarial: str = "nonsaturating"

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if self.sigma_hu <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma_hu}")
        if not 0.5 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0.5, 1.0], got {self.alpha}")
        if self.adversarial not in ("nonsaturating", "minimax"):
            raise ValueError(f"unknown adversarial form {self.adversarial!r}")


GammaLike = Union[GammaParam, Tensor, float]


def _gamma_tensor(gamma: GammaLike, dtype) -> Tensor:
    if isinstance(gamma, GammaParam):
        return gamma.tensor()
    if isinstance(gamma, Tensor):
        return gamma
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return Tensor(np.array([gamma]), dtype=dtype)


def texture_difference(x1: Tensor, x2: Tensor, gamma: GammaLike = 1.0) -> Tensor:
    """gamma * (x1 - x2): anything common to both estimates cancels."""
    if x1.shape != x2.shape:
        raise ValueError(f"texture_difference: shape mismatch {x1.shape} vs {x2.shape}")
    return T.scale(T.sub(x1, x2), _gamma_tensor(gamma, x1.dtype))


def _log_prob(p: Tensor) -> Tensor:
    return T.log(T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def bce_from_probs(p_real: Tensor, p_fake: Tensor) -> Tensor:
    """-(1/K) sum[log p_real + log(1 - p_fake)] with probabilities clamped by 1e-7."""
    if p_real.size == 0 or p_fake.size == 0:
        raise ValueError("discriminator loss needs non-empty batches")
    real = T.mean(_log_prob(p_real))
    fake = T.mean(_log_prob(1.0 - p_fake))
    return T.neg(T.add(real, fake))


def discriminator_loss(real_diffs: Tensor, fake_diffs: Tensor, disc: DiscriminatorParams) -> Tensor:
    """Binary cross-entropy of real (t1 - t2) vs fake gamma * (x1_hat - x2_hat).

    ``fake_diffs`` is detached, so only the discriminator can receive gradient.
    """
    return bce_from_probs(discriminator_forward(disc, real_diffs),
                          discriminator_forward(disc, fake_diffs.detach()))


def bias_reducing_pair(x1: Tensor, x2: Tensor, alpha: float):
    if not 0.5 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0.5, 1.0], got {alpha}")
    z1 = T.add(T.mul_const(x1, alpha), T.mul_const(x2, 1.0 - alpha))
    z2 = T.add(T.mul_const(x1, 1.0 - alpha), T.mul_const(x2, alpha))
    return z1, z2


def fidelity_term(x: Tensor, x1: Tensor, x2: Tensor, cfg: LossConfig) -> Tensor:
    """(1/K) sum_k (||z1 - x||^2 + ||z2 - x||^2) / (2 sigma^2); norms summed per patch."""
    z1, z2 = bias_reducing_pair(x1, x2, cfg.alpha)
    sq = T.add(T.sum_(T.square(T.sub(z1, x))), T.sum_(T.square(T.sub(z2, x))))
    return T.mul_const(sq, 1.0 / (2.0 * cfg.sigma_hu ** 2 * x.shape[0]))


def adversarial_term(fake_diffs: Tensor, disc: DiscriminatorParams, cfg: LossConfig) -> Tensor:
    """Generator's texture term, lambda-weighted; discriminator weights are held fixed."""
    p = discriminator_forward(disc.frozen(), fake_diffs)
    if cfg.adversarial == "nonsaturating":
        return T.mul_const(T.mean(_log_prob(p)), -cfg.lambda_)
    return T.mul_const(T.mean(_log_prob(1.0 - p)), cfg.lambda_)


def generator_loss_from_outputs(x: Tensor, x1: Tensor, x2: Tensor, gamma: GammaLike,
                                disc: Optional[DiscriminatorParams], cfg: LossConfig,
                                fake_diffs: Optional[Tensor] = None) -> Tensor:
    """Generator objective given the two branch estimates.

    Pass ``fake_diffs`` to reuse an already-computed texture difference.
    With ``lambda_ == 0`` the discriminator is not evaluated at all.
    """
    loss = fidelity_term(x, x1, x2, cfg)
    if cfg.lambda_ == 0:
        return loss
    if disc is None:
        raise ValueError("lambda > 0 requires a discriminator")
    if fake_diffs is None:
        fake_diffs = texture_difference(x1, x2, gamma)
    return T.add(loss, adversarial_term(fake_diffs, disc, cfg))


def generator_loss(x: Tensor, y1: Tensor, y2: Tensor, gen: GeneratorParams, gamma: GammaLike,
                   disc: Optional[DiscriminatorParams], cfg: LossConfig, train: bool = False) -> Tensor:
    if cfg.lambda_ > 0 and disc is None:
        raise ValueError("lambda > 0 requires a discriminator")
    x1, x2 = siamese_forward(gen, y1, y2, train)
    return generator_loss_from_outputs(x, x1, x2, gamma, disc, cfg)
