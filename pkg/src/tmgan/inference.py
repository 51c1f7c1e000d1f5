"""Whole-image application of a trained generator and TMGAN / BR blending."""

from __future__ import annotations

import numpy as np

from .models import GeneratorParams, generator_forward
from .tensor import Tensor


def enhance(params: GeneratorParams, y: np.ndarray) -> np.ndarray:
    """Run the generator on an [H, W] image or an [N, 1, H, W] batch.

    The network is fully convolutional, so any image at least as large as the
    kernel works. Output has the input's shape and is float64.
    """
    y = np.asarray(y)
    squeeze = y.ndim == 2
    batch = y[None, None] if squeeze else y
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ValueError(f"enhance expects [H, W] or [N, 1, H, W], got shape {y.shape}")
    if min(batch.shape[-2:]) < params.kernel_size:
        raise ValueError(f"image {batch.shape[-2:]} smaller than the {params.kernel_size}x{params.kernel_size} kernel")
    dtype = params.kernels[0].dtype
    out = generator_forward(params, Tensor(batch.astype(dtype, copy=False))).data.astype(np.float64)
    return out[0, 0] if squeeze else out


def blend(x_tmgan: np.ndarray, x_br: np.ndarray, eta: float) -> np.ndarray:
    """eta * x_tmgan + (1 - eta) * x_br, clipped to the pixelwise range of the two inputs."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    a = np.asarray(x_tmgan, dtype=np.float64)
    b = np.asarray(x_br, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"blend: shape mismatch {a.shape} vs {b.shape}")
    if eta == 1.0:
        return a.copy()
    if eta == 0.0:
        return b.copy()
    out = eta * a + (1.0 - eta) * b
    # rounding may step one ulp outside the convex hull
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))
