"""Image-quality and texture statistics: PSNR, SSIM, noise std, radial NPS, bias, and a
numerical check of the Gaussian texture-difference theorem."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import signal, stats

from .synthdata import (DEFAULT_SPACING_MM, NOISE_STREAM, DeformationSpec, TextureSpec, apply_deformation,
                        sample_texture)


def psnr(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    """10 log10(peak^2 / MSE); ``inf`` when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, dynamic_range: float, window: Optional[np.ndarray] = None,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM at every position where the window lies fully inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if dynamic_range <= 0:
        raise ValueError("ssim: dynamic_range must be positive")
    w = gaussian_window() if window is None else window
    if a.shape[0] < w.shape[0] or a.shape[1] < w.shape[1]:
        raise ValueError(f"ssim: image {a.shape} smaller than the {w.shape} window")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def filt(img):
        return signal.correlate(img, w, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    return float(np.mean(ssim_map(a, b, dynamic_range)))


def noise_std(region: np.ndarray) -> float:
    region = np.asarray(region, dtype=np.float64)
    if region.size < 100:
        raise ValueError(f"noise_std needs at least 100 pixels, got {region.size}")
    return float(np.std(region - region.mean(), ddof=1))


@dataclass
class NPSCurve:
    bin_centers: np.ndarray
    power: np.ndarray
    ensemble_count: int
    nps2d: Optional[np.ndarray] = field(default=None, repr=False)
    pixel_spacing_mm: tuple = (DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)

    def to_rows(self):
        return [(float(f), float(p)) for f, p in zip(self.bin_centers, self.power)]


def nps_2d(rois: np.ndarray, pixel_spacing_mm=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM),
           detrend: str = "roi") -> np.ndarray:
    """Ensemble-averaged 2-D noise power spectrum, DC at [0, 0], in HU^2 mm^2.

    ``detrend='roi'`` subtracts each ROI's mean (pure-noise input);
    ``'ensemble'`` subtracts the ensemble-mean image (repeated scans) and
    rescales by M / (M - 1) to undo the variance that removes.
    """
    rois = np.asarray(rois, dtype=np.float64)
    if rois.ndim != 3:
        raise ValueError(f"expected [M, N, N] ROIs, got shape {rois.shape}")
    m, ny, nx = rois.shape
    if m < 2:
        raise ValueError("NPS needs at least two ROIs")
    if ny != nx or ny & (ny - 1):
        raise ValueError(f"ROIs must be square with a power-of-two side, got {ny}x{nx}")
    dy, dx = _spacing(pixel_spacing_mm)
    if detrend == "roi":
        resid = rois - rois.mean(axis=(1, 2), keepdims=True)
        correction = 1.0
    elif detrend == "ensemble":
        resid = rois - rois.mean(axis=0, keepdims=True)
        correction = m / (m - 1)
    else:
        raise ValueError(f"unknown detrend mode {detrend!r}")
    spectra = np.abs(np.fft.fft2(resid)) ** 2
    return correction * spectra.mean(axis=0) * (dx * dy) / (nx * ny)


def _spacing(pixel_spacing_mm):
    if np.isscalar(pixel_spacing_mm):
        return float(pixel_spacing_mm), float(pixel_spacing_mm)
    dy, dx = pixel_spacing_mm
    return float(dy), float(dx)


def radial_bins(n: int, pixel_spacing_mm):
    """Bin index per DFT cell (0 = DC / beyond Nyquist, excluded) and bin centres in cycles/mm."""
    dy, dx = _spacing(pixel_spacing_mm)
    fy = np.fft.fftfreq(n, d=dy)[:, None]
    fx = np.fft.fftfreq(n, d=dx)[None, :]
    width = 1.0 / (n * dx)
    k = np.rint(np.sqrt(fy ** 2 + fx ** 2) / width).astype(int)
    nbins = n // 2
    k[k > nbins] = 0
    k[0, 0] = 0
    return k, width * np.arange(1, nbins + 1)


def nps_radial(rois: np.ndarray, pixel_spacing_mm=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM),
               detrend: str = "roi") -> NPSCurve:
    """Radially averaged NPS; one DFT cell per bin, DC excluded, up to Nyquist."""
    rois = np.asarray(rois, dtype=np.float64)
    if rois.ndim == 3 and len({r.shape for r in rois}) > 1:
        raise ValueError("ROIs have different sizes")
    nps = nps_2d(rois, pixel_spacing_mm, detrend)
    k, centers = radial_bins(rois.shape[-1], pixel_spacing_mm)
    sums = np.bincount(k.ravel(), weights=nps.ravel(), minlength=len(centers) + 1)
    counts = np.bincount(k.ravel(), minlength=len(centers) + 1)
    power = sums[1:] / np.maximum(counts[1:], 1)
    return NPSCurve(centers, power, rois.shape[0], nps, _spacing(pixel_spacing_mm))


def nps_distance(a: NPSCurve, b: NPSCurve) -> float:
    """L2 distance between the two curves after scaling each to unit total power."""
    if a.bin_centers.shape != b.bin_centers.shape or not np.allclose(a.bin_centers, b.bin_centers, rtol=1e-12):
        raise ValueError("nps_distance: curves use different binning")
    sa, sb = a.power.sum(), b.power.sum()
    if sa <= 0 or sb <= 0:
        raise ValueError("nps_distance: curve with zero total power has no shape")
    return float(np.linalg.norm(a.power / sa - b.power / sb))


@dataclass
class TextureSampleSet:
    """Pooled zero-mean texture samples tagged as estimation noise or target."""

    samples: np.ndarray
    role: str = "estimation_noise"

    def __post_init__(self):
        if self.role not in ("estimation_noise", "target"):
            raise ValueError(f"unknown role {self.role!r}")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def is_centered(self) -> bool:
        s = self.samples
        return bool(abs(s.mean()) < 0.01 * s.std())


def estimate_bias(generator: Callable[[np.ndarray], np.ndarray], x: np.ndarray, noise: TextureSpec, M: int,
                  deform: Optional[DeformationSpec] = None, seed: int = 0,
                  pixel_spacing_mm=(DEFAULT_SPACING_MM, DEFAULT_SPACING_MM)):
    """Monte-Carlo bias image and texture samples of ``generator`` at clean image ``x``.

    Returns (bias, deltas) with bias = mean_m h(G(x) + w_m) - x and
    deltas[m] = h(G(x) + w_m) - mean.
    """
    if M < 2:
        raise ValueError("estimate_bias needs M >= 2 draws")
    x = np.asarray(x, dtype=np.float64)
    gx = apply_deformation(x, deform or DeformationSpec(), pixel_spacing_mm)
    H, W = x.shape[-2:]
    outs = [np.asarray(generator(gx + sample_texture(noise, H, W, (seed, m), NOISE_STREAM)), dtype=np.float64)
            for m in range(M)]
    outs = np.stack(outs)
    mean = outs.mean(axis=0)
    return mean - x, outs - mean


@dataclass
class GaussianDifferenceReport:
    difference_gaussian: bool
    ks_statistic: float
    ks_pvalue: float
    component_std: float
    symmetric: bool
    max_imag_z: float
    samples: int
    note: str = ("independence and identical distribution of the two components are assumptions "
                 "of the check, not verified by it")

    @property
    def passed(self) -> bool:
        return self.difference_gaussian and self.symmetric


def theorem1_check(delta1: np.ndarray, delta2: np.ndarray, sigma_hypothesis: Optional[float] = None,
                   significance: float = 0.01, z_limit: float = 4.0) -> GaussianDifferenceReport:
    """Test paired texture samples against the Gaussian-difference conclusion.

    (a) KS test of delta1 - delta2 against N(0, 2 sigma^2), sigma from the
    hypothesis or else estimated as std(delta1 - delta2) / sqrt(2);
    (b) symmetry of each component: the imaginary part of the empirical
    characteristic function on a grid of t must stay within ``z_limit``
    standard errors of 0; (c) the implied component std.
    """
    d1 = np.asarray(delta1, dtype=np.float64).ravel()
    d2 = np.asarray(delta2, dtype=np.float64).ravel()
    if d1.shape != d2.shape:
        raise ValueError("theorem1_check: sample sets differ in size")
    n = d1.size
    if n < 10_000:
        raise ValueError(f"theorem1_check needs at least 10^4 paired samples, got {n}")
    diff = d1 - d2
    component = float(np.std(diff, ddof=1) / np.sqrt(2.0))
    sigma = component if sigma_hypothesis is None else float(sigma_hypothesis)
    ks = stats.kstest(diff, "norm", args=(0.0, sigma * np.sqrt(2.0)))

    worst = 0.0
    for d in (d1, d2):
        s = np.std(d)
        if s == 0:
            continue
        for t in np.linspace(0.25, 3.0, 12) / s:
            im = np.sin(t * d)
            se = np.std(im, ddof=1) / np.sqrt(n)
            if se > 0:
                worst = max(worst, abs(im.mean()) / se)
    return GaussianDifferenceReport(bool(ks.pvalue >= significance), float(ks.statistic), float(ks.pvalue), component,
                          bool(worst < z_limit), float(worst), n)
