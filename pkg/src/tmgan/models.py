"""Texture-matching generator, texture-difference discriminator and the gamma scale."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


@dataclass
class GeneratorParams:
    """Weights of a DnCNN-style residual denoiser.

    Layout: conv+ReLU, ``depth - 2`` x [conv (+BN) + ReLU], conv to one channel.
    The network predicts the residual ``R(y)`` and the estimate is ``y - R(y)``.
    ``intensity_scale`` maps offset-HU to network units and back; it is fixed.
    """

    kernels: list
    biases: list
    bn_scales: list = field(default_factory=list)
    bn_shifts: list = field(default_factory=list)
    bn_stats: list = field(default_factory=list)
    intensity_scale: float = 1000.0

    @classmethod
    def create(cls, depth: int = 7, width: int = 32, kernel_size: int = 3, batch_norm: bool = False,
               seed: int = 0, dtype=np.float64, intensity_scale: float = 1000.0) -> "GeneratorParams":
        if depth < 2:
            raise ValueError(f"generator depth must be at least 2, got {depth}")
        if width < 1 or kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("generator width must be positive and kernel size odd")
        rng = np.random.default_rng([seed, 0x47454E])
        chans = [1] + [width] * (depth - 1) + [1]
        kernels, biases = [], []
        for i in range(depth):
            shape = (chans[i + 1], chans[i], kernel_size, kernel_size)
            if i == depth - 1:
                kernels.append(_zeros(shape, dtype))
            else:
                kernels.append(_uniform_fan_in(rng, shape, chans[i] * kernel_size ** 2, dtype))
            biases.append(_zeros((chans[i + 1],), dtype))
        params = cls(kernels, biases, intensity_scale=intensity_scale)
        if batch_norm:
            for _ in range(depth - 2):
                params.bn_scales.append(Tensor(np.ones(width), requires_grad=True, dtype=dtype))
                params.bn_shifts.append(_zeros((width,), dtype))
                params.bn_stats.append(T.RunningStats.fresh(width, dtype))
        return params

    @property
    def depth(self) -> int:
        return len(self.kernels)

    @property
    def width(self) -> int:
        return self.kernels[0].shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernels[0].shape[-1]

    @property
    def batch_norm(self) -> bool:
        return bool(self.bn_scales)

    @property
    def receptive_field(self) -> int:
        return self.depth * (self.kernel_size - 1) + 1

    def parameters(self) -> list:
        out = []
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out += [k, b]
            if self.batch_norm and 0 < i < self.depth - 1:
                out += [self.bn_scales[i - 1], self.bn_shifts[i - 1]]
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def generator_forward(params: GeneratorParams, y: Tensor, train: bool = False) -> Tensor:
    """Estimate ``x_hat = y - R(y)`` for a batch ``y`` of shape [N, 1, H, W]."""
    if y.data.ndim != 4 or y.shape[1] != 1:
        raise ValueError(f"generator expects [N, 1, H, W] input, got shape {y.shape}")
    pad = params.kernel_size // 2
    h = T.mul_const(y, 1.0 / params.intensity_scale)
    last = params.depth - 1
    for i, (k, b) in enumerate(zip(params.kernels, params.biases)):
        h = T.conv2d(h, k, b, stride=1, padding=pad)
        if i == last:
            break
        if params.batch_norm and i > 0:
            h = T.batch_norm(h, params.bn_scales[i - 1], params.bn_shifts[i - 1],
                             "train" if train else "eval", params.bn_stats[i - 1])
        h = T.relu(h)
    return T.sub(y, T.mul_const(h, params.intensity_scale))


def siamese_forward(params: GeneratorParams, y1: Tensor, y2: Tensor, train: bool = False):
    """Apply the one shared generator to both inputs of a pair."""
    if y1.shape != y2.shape:
        raise ValueError(f"siamese branches differ in shape: {y1.shape} vs {y2.shape}")
    return generator_forward(params, y1, train), generator_forward(params, y2, train)


_DISC_BASE_WIDTHS = (32, 64, 128, 256)


def _disc_count(widths, kernel_size=3) -> int:
    chans = (1,) + tuple(widths)
    convs = sum(chans[i] * chans[i + 1] * kernel_size ** 2 + chans[i + 1] for i in range(len(widths)))
    return convs + widths[-1] + 1


def _widths_for(multiplier: float):
    return tuple(max(1, int(round(w * multiplier))) for w in _DISC_BASE_WIDTHS)


def matched_multiplier(target_count: int) -> float:
    """Width multiplier whose discriminator parameter count is closest to ``target_count``."""
    lo, hi = 1e-3, 64.0
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if _disc_count(_widths_for(mid)) < target_count:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda m: abs(math.log(_disc_count(_widths_for(m)) / target_count)))
    return best


@dataclass
class DiscriminatorParams:
    """Four stride-2 conv blocks, global average pool, dense head, sigmoid."""

    kernels: list
    biases: list
    head_w: Tensor
    head_b: Tensor
    input_scale: float = 0.01
    slope: float = 0.2

    @classmethod
    def create(cls, multiplier: float = 1.0, seed: int = 0, dtype=np.float64, input_scale: float = 0.01,
               zero_head: bool = True, match_count: Optional[int] = None) -> "DiscriminatorParams":
        """Build a discriminator.

        With ``match_count`` the width multiplier is solved so the trainable
        parameter count is as close as possible to that number.
        """
        if match_count is not None:
            multiplier = matched_multiplier(match_count)
        widths = _widths_for(multiplier)
        rng = np.random.default_rng([seed, 0x444953])
        chans = (1,) + widths
        kernels, biases = [], []
        for i in range(len(widths)):
            kernels.append(_uniform_fan_in(rng, (chans[i + 1], chans[i], 3, 3), chans[i] * 9, dtype))
            biases.append(_zeros((chans[i + 1],), dtype))
        if zero_head:
            head_w = _zeros((widths[-1], 1), dtype)
        else:
            head_w = _uniform_fan_in(rng, (widths[-1], 1), widths[-1], dtype)
        return cls(kernels, biases, head_w, _zeros((1,), dtype), input_scale=input_scale)

    @property
    def widths(self) -> tuple:
        return tuple(k.shape[0] for k in self.kernels)

    def parameters(self) -> list:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out += [k, b]
        return out + [self.head_w, self.head_b]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def frozen(self) -> "DiscriminatorParams":
        """View sharing storage whose tensors are not differentiated."""
        fz = lambda t: Tensor(t.data)  # noqa: E731
        return DiscriminatorParams([fz(k) for k in self.kernels], [fz(b) for b in self.biases],
                                   fz(self.head_w), fz(self.head_b), self.input_scale, self.slope)


def discriminator_logits(params: DiscriminatorParams, delta: Tensor) -> Tensor:
    if delta.data.ndim != 4 or delta.shape[1] != 1:
        raise ValueError(f"discriminator expects [N, 1, h, w] input, got shape {delta.shape}")
    h = T.mul_const(delta, params.input_scale)
    for k, b in zip(params.kernels, params.biases):
        h = T.leaky_relu(T.conv2d(h, k, b, stride=2, padding=1), params.slope)
    h = T.dense(T.global_avg_pool(h), params.head_w, params.head_b)
    return T.reshape(h, (delta.shape[0],))


def discriminator_forward(params: DiscriminatorParams, delta: Tensor) -> Tensor:
    """Probability, per sample, that a texture-difference patch is real."""
    return T.sigmoid(discriminator_logits(params, delta))


@dataclass
class GammaParam:
    """Positive scale between generated and target texture differences.

    Stored as ``log_gamma`` so optimizer steps can never make it non-positive.
    """

    log_gamma: Tensor
    learnable: bool = True

    @classmethod
    def create(cls, gamma: float = 1.0, learnable: bool = True, dtype=np.float64) -> "GammaParam":
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        return cls(Tensor(np.array([math.log(gamma)]), requires_grad=learnable, dtype=dtype), learnable)

    @property
    def value(self) -> float:
        return float(np.exp(self.log_gamma.data[0]))

    def tensor(self) -> Tensor:
        return T.exp(self.log_gamma)

    def parameters(self) -> list:
        return [self.log_gamma] if self.learnable else []
