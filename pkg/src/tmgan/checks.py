"""Self-check suites: gradient correctness, the Gaussian-difference theorem, NPS oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import LossConfig, discriminator_loss, generator_loss
from .metrics import nps_2d, nps_radial, radial_bins, theorem1_check
from .models import DiscriminatorParams, GammaParam, GeneratorParams
from .synthdata import TextureSpec, sample_texture
from .tensor import Tensor, finite_diff_check

GRAD_TOL = 1e-4
GRAD_PROBES = 50


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}/{self.name}: {self.detail}"


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _grad_cases(rng):
    """(name, fn, params) triples; every fn maps leaves to a scalar through one primitive."""
    x4 = _leaf(rng, (2, 3, 7, 6))
    w = _leaf(rng, (4, 3, 3, 3), 0.5)
    b = _leaf(rng, (4,))
    # squared-sum readout with random weights keeps the check sensitive to every output
    def readout(t):
        r = Tensor(np.random.default_rng(7).standard_normal(t.shape))
        return T.sum_(T.mul(t, r))

    a = _leaf(rng, (3, 5))
    c = _leaf(rng, (3, 5))
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 5)), requires_grad=True)
    s = _leaf(rng, (1,))
    bn_x = _leaf(rng, (3, 2, 4, 4))
    bn_g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    bn_b = _leaf(rng, (2,))
    stats = T.RunningStats.fresh(2)
    stats.mean[...] = rng.standard_normal(2)
    stats.var[...] = rng.uniform(0.5, 2.0, 2)
    dw = _leaf(rng, (5, 2))
    db = _leaf(rng, (2,))
    yield "conv2d_s1_p1", lambda: readout(T.conv2d(x4, w, b, 1, 1)), [x4, w, b]
    yield "conv2d_s2_p1", lambda: readout(T.conv2d(x4, w, b, 2, 1)), [x4, w, b]
    yield "conv2d_s1_p0", lambda: readout(T.conv2d(x4, w, b, 1, 0)), [x4, w, b]
    yield "relu", lambda: readout(T.relu(a)), [a]
    yield "leaky_relu", lambda: readout(T.leaky_relu(a, 0.2)), [a]
    yield "sigmoid", lambda: readout(T.sigmoid(a)), [a]
    yield "add", lambda: readout(T.add(a, c)), [a, c]
    yield "sub", lambda: readout(T.sub(a, c)), [a, c]
    yield "mul", lambda: readout(T.mul(a, c)), [a, c]
    yield "scale", lambda: readout(T.scale(a, s)), [a, s]
    yield "exp", lambda: readout(T.exp(a)), [a]
    yield "log", lambda: readout(T.log(pos)), [pos]
    yield "clip", lambda: readout(T.clip(pos, 0.0, 10.0)), [pos]
    yield "square", lambda: readout(T.square(a)), [a]
    yield "sum_axis", lambda: readout(T.sum_(x4, axis=(0, 2))), [x4]
    yield "mean", lambda: T.mul(T.mean(T.square(a)), T.reshape(s, ())), [a, s]
    yield "reshape", lambda: readout(T.reshape(a, (5, 3))), [a]
    yield "global_avg_pool", lambda: readout(T.global_avg_pool(x4)), [x4]
    yield "dense", lambda: readout(T.dense(a, dw, db)), [a, dw, db]
    yield "batch_norm_train", lambda: readout(T.batch_norm(bn_x, bn_g, bn_b, "train", T.RunningStats.fresh(2))), \
        [bn_x, bn_g, bn_b]
    yield "batch_norm_eval", lambda: readout(T.batch_norm(bn_x, bn_g, bn_b, "eval", stats)), [bn_x, bn_g, bn_b]


def _toy_models(seed: int = 0):
    """3-layer generator, small discriminator, learnable gamma, random non-zero init everywhere."""
    rng = np.random.default_rng(seed)
    gen = GeneratorParams.create(depth=3, width=4, seed=seed, intensity_scale=100.0)
    gen.kernels[-1].data[...] = rng.standard_normal(gen.kernels[-1].shape) * 0.3
    for bb in gen.biases:
        bb.data[...] = rng.standard_normal(bb.shape) * 0.1
    disc = DiscriminatorParams.create(multiplier=0.125, seed=seed, zero_head=False, input_scale=0.05)
    for bb in disc.biases:
        bb.data[...] = rng.standard_normal(bb.shape) * 0.1
    gamma = GammaParam.create(1.3, learnable=True)
    return gen, disc, gamma


def _loss_cases(seed: int = 0):
    rng = np.random.default_rng(seed + 1)
    gen, disc, gamma = _toy_models(seed)
    x = Tensor(1000 + 50 * rng.standard_normal((2, 1, 16, 16)))
    y1 = Tensor(x.data + 20 * rng.standard_normal(x.shape))
    y2 = Tensor(x.data + 20 * rng.standard_normal(x.shape))
    real = Tensor(30 * rng.standard_normal((2, 1, 16, 16)))
    fake = Tensor(30 * rng.standard_normal((2, 1, 16, 16)))
    cfg = LossConfig(lambda_=0.4, sigma_hu=7.8, alpha=0.5)
    cfg_sharp = LossConfig(lambda_=0.04, sigma_hu=50.0, alpha=1.0, adversarial="minimax")
    gparams = gen.parameters() + gamma.parameters()
    yield "discriminator_loss", lambda: discriminator_loss(real, fake, disc), disc.parameters()
    yield "generator_loss", lambda: generator_loss(x, y1, y2, gen, gamma, disc, cfg), gparams
    yield "generator_loss_minimax", lambda: generator_loss(x, y1, y2, gen, gamma, disc, cfg_sharp), gparams


def grad_suite(probes: int = GRAD_PROBES, tol: float = GRAD_TOL, seed: int = 0) -> list:
    out = []
    rng = np.random.default_rng(seed)
    cases = list(_grad_cases(rng)) + list(_loss_cases(seed))
    for name, fn, params in cases:
        rep = finite_diff_check(fn, params, probe_count=probes, h=1e-5, tolerance=tol, seed=seed)
        out.append(CheckResult("grad", name, rep.passed, f"max_rel_error={rep.max_rel_error:.3e} over {rep.probes} probes"))
    return out


def theorem_suite(n: int = 100_000, sigma: float = 1.0, seed: int = 0) -> list:
    """Gaussian pairs must pass; Bernoulli and Laplace pairs must fail the Gaussian-difference test."""
    rng = np.random.default_rng(seed)
    out = []
    g = theorem1_check(rng.normal(0, sigma, n), rng.normal(0, sigma, n), sigma)
    rel = abs(g.component_std - sigma) / sigma
    out.append(CheckResult("theorem", "gaussian_passes", g.passed and rel < 0.03,
                           f"ks_p={g.ks_pvalue:.3g} symmetric={g.symmetric} component_std={g.component_std:.4f} "
                           f"(rel err {rel:.2%})"))
    bern = theorem1_check(sigma * rng.choice([-1.0, 1.0], n), sigma * rng.choice([-1.0, 1.0], n), sigma)
    out.append(CheckResult("theorem", "bernoulli_fails_gaussianity", not bern.difference_gaussian,
                           f"difference_gaussian={bern.difference_gaussian} ks_stat={bern.ks_statistic:.3f}"))
    b = sigma / np.sqrt(2.0)
    lap = theorem1_check(rng.laplace(0, b, n), rng.laplace(0, b, n), sigma)
    out.append(CheckResult("theorem", "laplace_fails_gaussianity", not lap.difference_gaussian,
                           f"difference_gaussian={lap.difference_gaussian} ks_p={lap.ks_pvalue:.3g}"))
    return out


def _expected_radial(spec: TextureSpec, n: int, spacing: float) -> np.ndarray:
    """Bin-averaged analytic NPS: (white std)^2 |K(f)|^2 dx dy, DC excluded."""
    resp = spec.amplitude_response(n, n) ** 2 * spec.white_std(n, n) ** 2 * spacing ** 2
    k, centers = radial_bins(n, spacing)
    sums = np.bincount(k.ravel(), weights=resp.ravel(), minlength=len(centers) + 1)
    counts = np.bincount(k.ravel(), minlength=len(centers) + 1)
    return sums[1:] / counts[1:]


def nps_suite(rois: int = 200, size: int = 64, spacing: float = 0.5, std: float = 10.0, seed: int = 0,
              tol: float = 0.10) -> list:
    out = []
    white = TextureSpec(std, "white", seed=seed)
    field = np.stack([sample_texture(white, size, size, i) for i in range(rois)])
    curve = nps_radial(field, spacing)
    flat = std ** 2 * spacing ** 2
    err = np.max(np.abs(curve.power / flat - 1))
    out.append(CheckResult("nps", "white_flat", bool(err < tol), f"max per-bin rel err {err:.3f} vs s^2 d^2={flat:.4g}"))

    low = TextureSpec(std, "lowpass", cutoff=0.12, seed=seed)
    field = np.stack([sample_texture(low, size, size, i) for i in range(rois)])
    curve = nps_radial(field, spacing)
    expect = _expected_radial(low, size, spacing)
    err = np.max(np.abs(curve.power / expect - 1))
    out.append(CheckResult("nps", "filtered_matches_kernel", bool(err < tol), f"max per-bin rel err {err:.3f}"))

    nps = nps_2d(field, spacing)
    energy = nps.sum() / (size * spacing) ** 2
    var = np.mean(np.var(field, axis=(1, 2)))
    rel = abs(energy / var - 1)
    out.append(CheckResult("nps", "parseval", bool(rel < 0.02), f"integrated NPS {energy:.4g} vs variance {var:.4g}"))
    return out


SUITES: dict = {"grad": grad_suite, "theorem": theorem_suite, "nps": nps_suite}


def run_suites(name: str) -> list:
    if name == "all":
        return [r for fn in SUITES.values() for r in fn()]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    return SUITES[name]()
