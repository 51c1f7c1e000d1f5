"""Synthetic ground truth, correlated noise textures, blur, and paired training patches.

Images are in offset-HU (air = 0, water = 1000). Every generator here is a
pure function of its spec and integer seeds; noise for the training inputs and
samples of the target texture are drawn from disjoint seed streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

AIR = 0.0
WATER = 1000.0
DEFAULT_SPACING_MM = 400.0 / 512.0

NOISE_STREAM = 0x4E4F4953
TARGET_STREAM = 0x54415247
PATCH_STREAM = 0x50415443
PHANTOM_STREAM = 0x5048414E

_CONTRASTS = (-900, -700, -400, -200, -100, -60, -30, 30, 60, 100, 200, 400, 700, 1000)


@dataclass(frozen=True)
class PhantomImage:
    pixels: np.ndarray
    pixel_spacing_mm: tuple = (DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)

    @property
    def shape(self):
        return self.pixels.shape


def generate_phantom(seed: int, H: int = 128, W: int = 128, n_shapes: int = 6,
                     pixel_spacing_mm=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)) -> PhantomImage:
    """Water disc in air with ``n_shapes`` random ellipse/rectangle inserts."""
    if H < 16 or W < 16:
        raise ValueError(f"phantom must be at least 16x16, got {H}x{W}")
    if n_shapes < 1:
        raise ValueError(f"n_shapes must be >= 1, got {n_shapes}")
    rng = np.random.default_rng([PHANTOM_STREAM, seed])
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    ry, rx = 0.47 * H, 0.47 * W
    img = np.full((H, W), AIR)
    disc = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[disc] = WATER
    for _ in range(n_shapes):
        value = WATER + float(rng.choice(_CONTRASTS))
        while True:
            ay = rng.uniform(2.5, max(3.0, H / 6))
            ax = rng.uniform(2.5, max(3.0, W / 6))
            oy = rng.uniform(-0.55, 0.55) * ry
            ox = rng.uniform(-0.55, 0.55) * rx
            if rng.random() < 0.5:
                mask = ((yy - cy - oy) / ay) ** 2 + ((xx - cx - ox) / ax) ** 2 <= 1.0
            else:
                mask = (np.abs(yy - cy - oy) <= ay) & (np.abs(xx - cx - ox) <= ax)
            # inserts stay strictly inside the water disc
            if mask.any() and np.all(disc[mask]):
                break
        img[mask] = value
    return PhantomImage(np.clip(img, 0.0, 3000.0), tuple(float(s) for s in pixel_spacing_mm))


@dataclass(frozen=True)
class TextureSpec:
    """Zero-mean stationary Gaussian texture.

    ``kind`` selects the amplitude response applied to white noise:
    ``white``; ``lowpass`` (Gaussian, 1/e^0.5 point at ``cutoff``);
    ``bandpass`` (ramp times Gaussian, peak at ``cutoff``); or ``kernel``
    (explicit 2-D taps, centred). ``cutoff`` is in cycles/pixel. The field is
    scaled so its expected standard deviation is ``base_std_hu``.
    """

    base_std_hu: float
    kind: str = "white"
    cutoff: float = 0.25
    kernel: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.base_std_hu < 0:
            raise ValueError(f"base_std_hu must be non-negative, got {self.base_std_hu}")
        if self.kind not in ("white", "lowpass", "bandpass", "kernel"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if self.kind == "kernel" and self.kernel is None:
            raise ValueError("kind='kernel' needs kernel taps")
        if self.kind in ("lowpass", "bandpass") and not 0 < self.cutoff <= 0.5:
            raise ValueError(f"cutoff must lie in (0, 0.5] cycles/pixel, got {self.cutoff}")

    @staticmethod
    def from_kernel(base_std_hu: float, taps, seed: int = 0) -> "TextureSpec":
        taps = np.asarray(taps, dtype=float)
        return TextureSpec(base_std_hu, "kernel", kernel=tuple(map(tuple, taps)), seed=seed)

    def amplitude_response(self, H: int, W: int) -> np.ndarray:
        """|K(f)| on the H x W DFT grid (DC at [0, 0]), before amplitude scaling."""
        fy = np.fft.fftfreq(H)[:, None]
        fx = np.fft.fftfreq(W)[None, :]
        f = np.sqrt(fy ** 2 + fx ** 2)
        if self.kind == "white":
            return np.ones((H, W))
        if self.kind == "lowpass":
            return np.exp(-0.5 * (f / self.cutoff) ** 2)
        if self.kind == "bandpass":
            r = f / self.cutoff
            return r * np.exp(0.5 * (1.0 - r ** 2))
        taps = np.asarray(self.kernel, dtype=float)
        kh, kw = taps.shape
        if kh > H or kw > W:
            raise ValueError(f"kernel {taps.shape} larger than field {H}x{W}")
        emb = np.zeros((H, W))
        emb[:kh, :kw] = taps
        emb = np.roll(emb, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        return np.abs(np.fft.fft2(emb))

    def white_std(self, H: int, W: int) -> float:
        """Std of the white field that, once filtered, has std ``base_std_hu``."""
        resp = self.amplitude_response(H, W).copy()
        resp[0, 0] = 0.0
        power = np.mean(resp ** 2)
        if power == 0:
            return 0.0
        return self.base_std_hu / np.sqrt(power)


DrawIndex = Union[int, Sequence[int]]


def _key(draw_index: DrawIndex) -> list:
    return [int(draw_index)] if np.isscalar(draw_index) else [int(v) for v in draw_index]


def sample_texture(spec: TextureSpec, H: int, W: int, draw_index: DrawIndex = 0,
                   stream: int = NOISE_STREAM) -> np.ndarray:
    """One H x W texture draw, keyed by (stream, spec.seed, draw_index).

    Filtering is circular so the field is exactly stationary; the DC term is
    removed, which makes every draw exactly zero-mean up to rounding.
    """
    rng = np.random.default_rng([stream, spec.seed] + _key(draw_index))
    white = rng.standard_normal((H, W))
    scale = spec.white_std(H, W)
    if spec.kind == "white":
        field = white * scale
        return field - field.mean()
    resp = spec.amplitude_response(H, W).copy()
    resp[0, 0] = 0.0
    if spec.kind == "kernel":
        taps = np.asarray(spec.kernel, dtype=float)
        emb = np.zeros((H, W))
        kh, kw = taps.shape
        emb[:kh, :kw] = taps
        emb = np.roll(emb, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        transfer = np.fft.fft2(emb)
        transfer[0, 0] = 0.0
    else:
        transfer = resp
    return np.real(np.fft.ifft2(np.fft.fft2(white) * transfer)) * scale


def texture_bank(spec: TextureSpec, count: int, size: int, seed: int = 0) -> np.ndarray:
    """``count`` independent target-texture samples, shape [count, size, size]."""
    return np.stack([sample_texture(spec, size, size, (seed, i), stream=TARGET_STREAM) for i in range(count)])


@dataclass(frozen=True)
class DeformationSpec:
    """Forward-model deformation: identity (denoising) or Gaussian blur (sharpening)."""

    mode: str = "identity"
    sigma_mm: tuple = (0.244, 0.244)

    def __post_init__(self):
        if self.mode not in ("identity", "gaussian_blur"):
            raise ValueError(f"unknown deformation mode {self.mode!r}")
        if self.mode == "gaussian_blur" and min(self.sigma_mm) <= 0:
            raise ValueError(f"blur sigma must be positive, got {self.sigma_mm}")


def gaussian_taps(sigma_px: float, truncate: float = 4.0) -> np.ndarray:
    """Normalised, symmetric 1-D Gaussian taps spanning +-truncate*sigma."""
    radius = int(truncate * sigma_px + 0.5)
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma_px) ** 2)
    return k / k.sum()


def apply_deformation(x: np.ndarray, spec: DeformationSpec, pixel_spacing_mm=(DEFAULT_SPACING_MM,) * 2) -> np.ndarray:
    if spec.mode == "identity":
        return np.array(x, copy=True)
    sy = spec.sigma_mm[0] / pixel_spacing_mm[0]
    sx = spec.sigma_mm[1] / pixel_spacing_mm[1]
    out = ndimage.correlate1d(np.asarray(x, dtype=float), gaussian_taps(sy), axis=-2, mode="reflect")
    return ndimage.correlate1d(out, gaussian_taps(sx), axis=-1, mode="reflect")


def noisy_pair(gx: np.ndarray, noise: TextureSpec, seed: DrawIndex):
    """y_i = G(x) + w_i, with w_i drawn from the noise stream under key (seed, i)."""
    H, W = gx.shape[-2:]
    key = _key(seed)
    y1 = gx + sample_texture(noise, H, W, key + [1], stream=NOISE_STREAM)
    y2 = gx + sample_texture(noise, H, W, key + [2], stream=NOISE_STREAM)
    return y1, y2


def make_pair(x, deform: DeformationSpec, noise: TextureSpec, seed: DrawIndex, pixel_spacing_mm=None):
    """Two conditionally independent corrupted observations of ``x``."""
    if isinstance(x, PhantomImage):
        spacing = pixel_spacing_mm or x.pixel_spacing_mm
        x = x.pixels
    else:
        spacing = pixel_spacing_mm or (DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)
    return noisy_pair(apply_deformation(x, deform, spacing), noise, seed)


@dataclass
class PatchPair:
    """Clean patch ``x`` and its two corrupted versions, each shaped [1, p, p]."""

    x: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    phantom: int = 0
    row: int = 0
    col: int = 0
    seed: tuple = field(default_factory=tuple)


def stack_pairs(pairs: Sequence[PatchPair]):
    """[K, 1, p, p] arrays for x, y1, y2."""
    return (np.stack([p.x for p in pairs]), np.stack([p.y1 for p in pairs]), np.stack([p.y2 for p in pairs]))


def build_dataset(phantom_count: int, patch_size: int, pairs_per_phantom: int, split_fraction: float,
                  seed: int, noise: Optional[TextureSpec] = None, deform: Optional[DeformationSpec] = None,
                  phantom_size: int = 128, n_shapes: int = 6,
                  pixel_spacing_mm=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)):
    """Random patches from synthetic phantoms, shuffled and split into (train, validation).

    Pair ``j`` of phantom ``k`` uses noise key (seed, k, j); the phantom itself
    uses seed (seed, k) folded into one integer.
    """
    if not 0 < split_fraction < 1:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    if patch_size > phantom_size:
        raise ValueError(f"patch size {patch_size} exceeds phantom size {phantom_size}")
    noise = noise if noise is not None else TextureSpec(50.0)
    deform = deform if deform is not None else DeformationSpec()
    total = phantom_count * pairs_per_phantom
    n_train = int(round(split_fraction * total))
    if n_train < 1 or n_train > total - 1:
        raise ValueError(f"split_fraction {split_fraction} of {total} patches leaves an empty split; "
                         "use more phantoms/patches or a different fraction")
    phantoms = [generate_phantom(phantom_seed(seed, k), phantom_size, phantom_size, n_shapes, pixel_spacing_mm).pixels
                for k in range(phantom_count)]
    pairs = sample_patch_pairs(phantoms, patch_size, pairs_per_phantom, seed, noise, deform, pixel_spacing_mm)
    order = np.random.default_rng([PATCH_STREAM, seed]).permutation(total)
    shuffled = [pairs[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def sample_patch_pairs(images: Sequence[np.ndarray], patch_size: int, pairs_per_image: int, seed: int,
                       noise: TextureSpec, deform: Optional[DeformationSpec] = None,
                       pixel_spacing_mm=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)) -> list:
    """Random crops of clean images with two independent corruptions each, in image order.

    The forward model is applied to the whole image before cropping so blur
    sees real context at the patch border.
    """
    deform = deform if deform is not None else DeformationSpec()
    pairs = []
    for k, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        H, W = img.shape
        if patch_size > min(H, W):
            raise ValueError(f"patch size {patch_size} exceeds image {k} of shape {img.shape}")
        gx = apply_deformation(img, deform, pixel_spacing_mm)
        rng = np.random.default_rng([PATCH_STREAM, seed, k])
        for j in range(pairs_per_image):
            r = int(rng.integers(0, H - patch_size + 1))
            c = int(rng.integers(0, W - patch_size + 1))
            sl = (slice(r, r + patch_size), slice(c, c + patch_size))
            y1, y2 = noisy_pair(gx[sl], noise, (seed, k, j))
            pairs.append(PatchPair(img[sl][None].copy(), y1[None], y2[None], k, r, c, (seed, k, j)))
    return pairs


def phantom_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
