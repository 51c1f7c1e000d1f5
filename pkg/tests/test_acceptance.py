"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (shown in the terminal summary)
and then asserts. Criteria 4-6 and 9 share one desk-scale lambda sweep,
trained once per session; that sweep dominates the runtime.
"""

import csv
import time

import numpy as np
import pytest

from tmgan import cli
from tmgan import tensor as T
from tmgan.checks import grad_suite, nps_suite, theorem_suite
from tmgan.config import RunConfig
from tmgan.inference import blend, enhance
from tmgan.losses import texture_difference
from tmgan.metrics import noise_std, nps_distance, nps_radial, psnr
from tmgan.models import discriminator_forward, siamese_forward
from tmgan.synthdata import build_dataset, sample_texture, stack_pairs, texture_bank
from tmgan.tensor import Tensor
from tmgan.trainer import Trainer, build_models

# desk-scale sweep; see README for why lambda is far above the clinical-scale values
SWEEP_LAMBDAS = (0.0, 10.0, 100.0)
SWEEP = dict(n_updates=2000, batch_size=8, gen_depth=7, gen_width=16, lr_gen=1e-3, lr_disc=1e-4, sigma_hu=50.0,
             noise_std_hu=70.0, noise_kind="white", target_std_hu=30.0, target_kind="bandpass", target_cutoff=0.2,
             gamma_learnable=False, phantom_count=16, phantom_size=128, patch_size=32, pairs_per_phantom=64,
             test_phantom_count=4, water_roi_count=64, water_roi_size=64, precision="train32", seed=0)
PEAK_HU = cli.DEFAULT_PEAK_HU
MIN_GAP_DB = 0.2


@pytest.fixture(scope="module")
def sweep():
    """Generators (and the largest-lambda discriminator) trained at each sweep lambda."""
    t0 = time.time()
    base = RunConfig(**SWEEP)
    train_set, _ = build_dataset(base.phantom_count, base.patch_size, base.pairs_per_phantom, base.split_fraction,
                                 base.seed, base.noise_spec(), base.deformation(), base.phantom_size)
    data = stack_pairs(train_set)
    bank = texture_bank(base.target_spec(), base.target_bank_size, base.patch_size, base.seed)
    models = {}
    for lam in SWEEP_LAMBDAS:
        cfg = base.replace(lambda_=lam)
        gen, gamma, disc = build_models(cfg)
        Trainer(cfg.train_config(), gen, gamma, disc, bank if lam > 0 else None).run(*data)
        models[lam] = (gen, gamma, disc)
    return base, models, time.time() - t0


# ---------------------------------------------------------------- 1-3: self-check suites


def _suite(results):
    worst = [r for r in results if not r.passed]
    return not worst, "; ".join(f"{r.name} {r.detail}" for r in (worst or results))


def test_criterion_1_gradients(acceptance):
    t0 = time.time()
    results = grad_suite(probes=50, tol=1e-4)
    secs = time.time() - t0
    ok, detail = _suite(results)
    ok = ok and secs < 120
    worst = max(float(r.detail.split("=")[1].split()[0]) for r in results)
    acceptance(1, "gradient correctness", ok,
               f"{len(results)} cases, worst max_rel_error {worst:.2e} (< 1e-4), {secs:.0f}s (< 120s)")
    assert ok, detail


def test_criterion_2_theorem(acceptance):
    t0 = time.time()
    results = theorem_suite(n=100_000)
    secs = time.time() - t0
    ok, detail = _suite(results)
    ok = ok and secs < 60
    acceptance(2, "Gaussian-difference theorem suite", ok, f"{detail}; {secs:.1f}s (< 60s)")
    assert ok, detail


def test_criterion_3_nps(acceptance):
    results = nps_suite(rois=200, size=64)
    ok, detail = _suite(results)
    acceptance(3, "NPS oracle equivalence", ok, detail)
    assert ok, detail


# ---------------------------------------------------------------- 4: lambda sweep


@pytest.mark.slow
def test_criterion_4_lambda_trend(sweep, acceptance):
    base, models, secs = sweep
    water, tgt = cli.water_rois(base), cli.target_rois(base)
    tgt_curve = nps_radial(tgt, base.spacing)
    in_std = np.mean([noise_std(w) for w in water])
    stds, dists = [], []
    for lam in SWEEP_LAMBDAS:
        out = enhance(models[lam][0], water[:, None])[:, 0]
        stds.append(float(np.mean([noise_std(o) for o in out])))
        dists.append(nps_distance(nps_radial(out, base.spacing), tgt_curve))
    a = all(s1 < s2 for s1, s2 in zip(stds, stds[1:]))
    b = dists[-1] < dists[0]
    c = all(s < in_std for s in stds)
    ok = a and b and c and secs < 1800
    table = ", ".join(f"lambda={lam:g}: std {s:.2f} HU, nps_dist {d:.3f}" for lam, s, d in zip(SWEEP_LAMBDAS, stds, dists))
    acceptance(4, "lambda-sweep trend", ok,
               f"{table}; input std {in_std:.2f} HU, target std {np.mean([noise_std(t) for t in tgt]):.2f} HU; "
               f"(a) std increasing={a} (b) distance decreasing={b} (c) below input={c}; sweep trained in {secs:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5: algorithm ordering


@pytest.mark.slow
def test_criterion_5_ordering(sweep, acceptance):
    base, models, _ = sweep
    exams = cli.test_exams(base)
    truth = np.stack([t for t, _ in exams])
    noisy = np.stack([y for _, y in exams])
    br_gen, tm_gen = models[SWEEP_LAMBDAS[0]][0], models[SWEEP_LAMBDAS[-1]][0]
    outs = {"input": noisy,
            "BR": cli.enhance_blended(tm_gen, br_gen, 0.0, noisy),
            "TMGAN-blended": cli.enhance_blended(tm_gen, br_gen, 0.3, noisy),
            "TMGAN": cli.enhance_blended(tm_gen, br_gen, 1.0, noisy)}
    p = {k: float(np.mean([psnr(a, b, PEAK_HU) for a, b in zip(v, truth)])) for k, v in outs.items()}
    gap1, gap2 = p["BR"] - p["TMGAN-blended"], p["TMGAN-blended"] - p["TMGAN"]
    ok = gap1 >= MIN_GAP_DB and gap2 >= MIN_GAP_DB
    acceptance(5, "algorithm ordering", ok,
               ", ".join(f"{k} {v:.2f} dB" for k, v in p.items()) +
               f" over {len(exams)} held-out exams; gaps {gap1:.2f} / {gap2:.2f} dB (>= {MIN_GAP_DB})")
    assert ok


# ---------------------------------------------------------------- 6: texture isolation


@pytest.mark.slow
def test_criterion_6_texture_isolation(sweep, acceptance):
    base, models, _ = sweep
    gen, gamma, disc = models[SWEEP_LAMBDAS[-1]]
    exams = cli.test_exams(base)
    truth = exams[0][0]
    rng = np.random.default_rng(6)
    y1 = truth + sample_texture(base.noise_spec(), *truth.shape, (6, 1))
    y2 = truth + sample_texture(base.noise_spec(), *truth.shape, (6, 2))
    x1, x2 = siamese_forward(gen, Tensor(y1[None, None], dtype=np.float32), Tensor(y2[None, None], dtype=np.float32))
    # outputs carried in 64-bit; an integer-HU anatomy image is then added without rounding
    x1 = Tensor(x1.data.astype(np.float64))
    x2 = Tensor(x2.data.astype(np.float64))
    offset = np.round(exams[1][0] + rng.integers(-50, 50, truth.shape))[None, None]
    d_plain = texture_difference(x1, x2, gamma)
    d_shift = texture_difference(T.add(x1, Tensor(offset)), T.add(x2, Tensor(offset)), gamma)
    same_diff = np.array_equal(d_plain.data, d_shift.data)
    p_plain = discriminator_forward(disc, d_plain).data
    p_shift = discriminator_forward(disc, d_shift).data
    same_disc = np.array_equal(p_plain, p_shift)
    ok = same_diff and same_disc
    acceptance(6, "texture-isolation invariant", ok,
               f"offset range [{offset.min():.0f}, {offset.max():.0f}] HU; texture_difference bitwise equal={same_diff}, "
               f"discriminator output bitwise equal={same_disc} (p={p_plain.ravel()[0]:.6f})")
    assert ok


# ---------------------------------------------------------------- 7: update gates


def test_criterion_7_gates(acceptance):
    rng = np.random.default_rng(7)
    tr_set, _ = build_dataset(2, 16, 4, 0.75, 0, RunConfig().noise_spec(), phantom_size=32)
    data = stack_pairs(tr_set)
    failures, trials = [], 12
    for trial in range(trials):
        t_d = float(rng.uniform(0.01, 5.0))
        n_d = int(rng.integers(1, 7))
        n = int(rng.integers(1, 4))
        cfg = RunConfig(gen_depth=3, gen_width=4, batch_size=4, patch_size=16, lambda_=0.5, t_d=t_d, n_d=n_d,
                        n_updates=n, target_bank_size=8, precision="test64")
        bank = texture_bank(cfg.target_spec(), 8, 16)
        for value, expected in ((t_d / 2, 0), (2 * t_d, n_d)):
            gen, gamma, disc = build_models(cfg)
            tr = Trainer(cfg.train_config(), gen, gamma, disc, bank)
            head = disc.parameters()[-1]
            # stub d: constant value, kept on the tape through a zero-weighted discriminator term
            tr.discriminator_objective = lambda real, fake, v=value, h=head: T.add_const(
                T.mul_const(T.sum_(T.square(h)), 0.0), v)
            log_ = tr.run(*data)
            counts = [r.n_d for r in log_]
            if counts != [expected] * n or tr.disc_opt.state.step != expected * n:
                failures.append((t_d, n_d, value, counts))
    ok = not failures
    acceptance(7, "discriminator update gates (stubbed losses)", ok,
               f"{trials} random (T_d, N_d) draws x {{threshold, cap}}: "
               f"{'all exact' if ok else f'{len(failures)} mismatches, first {failures[0]}'}")
    assert ok


# ---------------------------------------------------------------- 8: pipeline determinism

PIPELINE_CONFIG = """\
phantom_count = 2
phantom_size = 48
patch_size = 16
pairs_per_phantom = 8
split_fraction = 0.75
gen_depth = 3
gen_width = 4
batch_size = 4
n_updates = 5
lr_gen = 0.001
lr_disc = 0.0001
lambda = 50
gamma_learnable = false
target_bank_size = 16
water_roi_count = 4
water_roi_size = 32
test_phantom_count = 2
precision = test64
seed = 11
"""


def _pipeline(root):
    root.mkdir()
    (root / "run.txt").write_text(PIPELINE_CONFIG)
    data = root / "data"
    steps = [
        ["gen-data", "--config", str(root / "run.txt"), "--out", str(data)],
        ["train", "--data", str(data), "--out", str(root / "tmgan.ckpt")],
        ["train", "--data", str(data), "--out", str(root / "br.ckpt"), "--mode", "br"],
        ["enhance", "--tmgan", str(root / "tmgan.ckpt"), "--br", str(root / "br.ckpt"), str(data / "test" / "noisy"),
         str(root / "out" / "blend")],
        ["enhance", "--tmgan", str(root / "tmgan.ckpt"), "--eta", "1", str(data / "water"), str(root / "out" / "water")],
        ["evaluate", "--truth", str(data / "test" / "truth"), "--method", f"blend={root / 'out' / 'blend'}",
         "--rois", f"blend={root / 'out' / 'water'}", "--target-bank", str(data / "target_rois"),
         "--out", str(root / "out" / "metrics.csv")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv


def _contents(root):
    files = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        if p.name.endswith(".log.csv"):
            # wall-clock column is the only non-deterministic field
            with open(p, newline="") as fh:
                files[p.relative_to(root)] = [r[:-1] for r in csv.reader(fh)]
        else:
            files[p.relative_to(root)] = p.read_bytes()
    return files


def test_criterion_8_determinism(tmp_path, acceptance):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    fa, fb = _contents(a), _contents(b)
    differ = sorted(str(k) for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))
    ok = not differ
    acceptance(8, "pipeline determinism (test64)", ok,
               f"{len(fa)} files compared across two gen-data/train/enhance/evaluate runs; "
               f"{'all byte-identical (log seconds column excluded)' if ok else 'differ: ' + ', '.join(differ[:5])}")
    assert ok


# ---------------------------------------------------------------- 9: blending


@pytest.mark.slow
def test_criterion_9_blending(sweep, acceptance):
    base, models, _ = sweep
    noisy = np.stack([y for _, y in cli.test_exams(base)])
    tm = enhance(models[SWEEP_LAMBDAS[-1]][0], noisy[:, None])[:, 0]
    br = enhance(models[SWEEP_LAMBDAS[0]][0], noisy[:, None])[:, 0]
    end1 = np.array_equal(blend(tm, br, 1.0), tm)
    end0 = np.array_equal(blend(tm, br, 0.0), br)
    rng = np.random.default_rng(9)
    worst = 0.0
    for e1, e2 in rng.uniform(0, 1, (20, 2)):
        lhs = blend(tm, br, e1) + blend(tm, br, e2)
        worst = max(worst, float(np.max(np.abs(lhs - 2 * blend(tm, br, (e1 + e2) / 2)))))
    ok = end0 and end1 and worst <= 1e-12 * max(1.0, np.abs(tm).max(), np.abs(br).max())
    acceptance(9, "blending exactness", ok,
               f"eta=1 bitwise={end1}, eta=0 bitwise={end0}, worst linearity error {worst:.2e} HU "
               f"on pixels up to {max(np.abs(tm).max(), np.abs(br).max()):.0f} HU (tolerance 1e-12 relative)")
    assert ok
