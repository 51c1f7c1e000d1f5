"""Command-line front end: gen-data, train, enhance, evaluate, check.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric failure,
3 self-check failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import checks
from .config import RunConfig
from .imageio import ImageFormatError, read_image, write_image
from .inference import blend, enhance
from .metrics import noise_std, nps_distance, nps_radial, psnr, ssim
from .synthdata import (NOISE_STREAM, TARGET_STREAM, build_dataset, generate_phantom, noisy_pair, phantom_seed,
                        apply_deformation, sample_texture, texture_bank)
from .trainer import (CheckpointError, Trainer, TrainingError, build_models, load_checkpoint, save_checkpoint,
                      validation_mse, identity_mse)

log = logging.getLogger("tmgan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

# draw-key tags that keep held-out data disjoint from the training draws
TEST_TAG = 0x54455354
WATER_TAG = 0x57415452

MANIFEST_HEADER = ("index", "split", "phantom", "row", "col", "phantom_seed", "noise_key", "x_file", "y1_file",
                   "y2_file")
BANK_HEADER = ("index", "role", "draw_key", "file")
METRICS_HEADER = ("method", "psnr_db", "ssim", "noise_std_hu", "nps_distance_to_target")
NPS_HEADER = ("frequency_per_mm", "nps_hu2_mm2")
DEFAULT_PEAK_HU = 2000.0
_GENERATED = ("config.txt", "manifest.csv", "bank_manifest.csv", "phantoms", "pairs", "target", "test", "water",
              "target_rois")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _load_config(path: Optional[str], **overrides) -> RunConfig:
    try:
        if path is None:
            return RunConfig.loads("", **overrides)
        return RunConfig.load(path, **overrides)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config: {exc}") from None


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _image_files(path: Path) -> list:
    if path.is_dir():
        files = sorted(path.glob("*.txim"))
        if not files:
            raise UsageError(f"{path}: no .txim images")
        return files
    if not path.exists():
        raise UsageError(f"{path}: no such file or directory")
    return [path]


def _stack(files) -> tuple:
    imgs, spacing = [], None
    for f in files:
        px, sp = read_image(f)
        imgs.append(px)
        spacing = spacing or sp
    return np.stack(imgs), spacing


# ---------------------------------------------------------------- gen-data


def water_rois(cfg: RunConfig) -> np.ndarray:
    """Uniform water ROIs with input noise, for output-texture NPS."""
    n = cfg.water_roi_size
    spec = cfg.noise_spec()
    return np.stack([1000.0 + sample_texture(spec, n, n, (WATER_TAG, i), NOISE_STREAM)
                     for i in range(cfg.water_roi_count)])


def target_rois(cfg: RunConfig) -> np.ndarray:
    n = cfg.water_roi_size
    spec = cfg.target_spec()
    return np.stack([sample_texture(spec, n, n, (WATER_TAG, i), TARGET_STREAM) for i in range(cfg.water_roi_count)])


def test_exams(cfg: RunConfig):
    """Held-out (truth, noisy) phantoms; phantom indices follow the training ones."""
    out = []
    for t in range(cfg.test_phantom_count):
        k = cfg.phantom_count + t
        ph = generate_phantom(phantom_seed(cfg.seed, k), cfg.phantom_size, cfg.phantom_size, cfg.n_shapes,
                              cfg.spacing)
        gx = apply_deformation(ph.pixels, cfg.deformation(), cfg.spacing)
        y, _ = noisy_pair(gx, cfg.noise_spec(), (cfg.seed, TEST_TAG, t))
        out.append((ph.pixels, y))
    return out


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, seed=args.seed, precision=args.precision)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
        for name in _GENERATED:
            p = out / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    for sub in ("phantoms", "pairs", "target", "test/truth", "test/noisy", "water", "target_rois"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    sp = cfg.spacing
    cfg.save(out / "config.txt")

    for k in range(cfg.phantom_count):
        ph = generate_phantom(phantom_seed(cfg.seed, k), cfg.phantom_size, cfg.phantom_size, cfg.n_shapes, sp)
        write_image(out / "phantoms" / f"phantom_{k:04d}.txim", ph.pixels, sp)

    train_set, val_set = build_dataset(cfg.phantom_count, cfg.patch_size, cfg.pairs_per_phantom,
                                       cfg.split_fraction, cfg.seed, cfg.noise_spec(), cfg.deformation(),
                                       cfg.phantom_size, cfg.n_shapes, sp)
    rows = []
    for i, (split, p) in enumerate([("train", p) for p in train_set] + [("val", p) for p in val_set]):
        names = [f"{i:06d}_{part}.txim" for part in ("x", "y1", "y2")]
        for name, arr in zip(names, (p.x, p.y1, p.y2)):
            write_image(out / "pairs" / name, arr[0], sp)
        rows.append([i, split, p.phantom, p.row, p.col, phantom_seed(cfg.seed, p.phantom),
                     ":".join(str(v) for v in p.seed)] + [f"pairs/{n}" for n in names])
    _write_csv(out / "manifest.csv", MANIFEST_HEADER, rows)

    bank_rows = []
    bank = texture_bank(cfg.target_spec(), cfg.target_bank_size, cfg.patch_size, cfg.seed)
    for i, t in enumerate(bank):
        write_image(out / "target" / f"bank_{i:05d}.txim", t, sp)
        bank_rows.append([i, "train", f"{cfg.seed}:{i}", f"target/bank_{i:05d}.txim"])
    for i, t in enumerate(target_rois(cfg)):
        write_image(out / "target_rois" / f"roi_{i:04d}.txim", t, sp)
        bank_rows.append([i, "eval", f"{WATER_TAG}:{i}", f"target_rois/roi_{i:04d}.txim"])
    _write_csv(out / "bank_manifest.csv", BANK_HEADER, bank_rows)

    for i, w in enumerate(water_rois(cfg)):
        write_image(out / "water" / f"roi_{i:04d}.txim", w, sp)
    for t, (truth, noisy) in enumerate(test_exams(cfg)):
        write_image(out / "test" / "truth" / f"exam_{t:03d}.txim", truth, sp)
        write_image(out / "test" / "noisy" / f"exam_{t:03d}.txim", noisy, sp)
    print(f"wrote {len(rows)} pairs ({len(train_set)} train / {len(val_set)} val), "
          f"{len(bank)} target samples to {out}")
    return EXIT_OK


def load_pairs(data_dir: Path, split: str):
    rows = [r for r in _read_csv(data_dir / "manifest.csv") if r["split"] == split]
    if not rows:
        raise UsageError(f"{data_dir}: manifest has no {split!r} rows")
    parts = []
    for key in ("x_file", "y1_file", "y2_file"):
        parts.append(np.stack([read_image(data_dir / r[key])[0] for r in rows])[:, None])
    return tuple(parts)


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    data = Path(args.data)
    if not (data / "manifest.csv").exists():
        raise UsageError(f"{data}: not a dataset directory (manifest.csv missing)")
    cfg_path = args.config if args.config is not None else data / "config.txt"
    overrides = dict(seed=args.seed, precision=args.precision, n_updates=args.n_updates)
    if args.mode == "br":
        overrides["lambda_"] = 0.0
    cfg = _load_config(cfg_path, **overrides)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")

    if args.resume and out.exists():
        ck = load_checkpoint(out)
        if ck.config.dumps() != cfg.dumps():
            raise UsageError(f"{out}: checkpoint was trained with a different configuration")
        gen, gamma, disc, gstate, dstate = ck.gen, ck.gamma, ck.disc, ck.gen_state, ck.disc_state
    else:
        gen, gamma, disc = build_models(cfg)
        gstate = dstate = None

    x, y1, y2 = load_pairs(data, "train")
    bank = None
    if cfg.lambda_ > 0:
        rows = [r for r in _read_csv(data / "bank_manifest.csv") if r["role"] == "train"]
        bank = np.stack([read_image(data / r["file"])[0] for r in rows])
    trainer = Trainer(cfg.train_config(), gen, gamma, disc, bank, gstate, dstate)
    # checkpoint on failure too, so a diverged run can be inspected
    try:
        trainer.run(x, y1, y2, log_path=log_path)
    finally:
        save_checkpoint(out, cfg, gen, gamma, disc, trainer.gen_opt.state, trainer.disc_opt.state)
    vx, vy1, vy2 = load_pairs(data, "val")
    print(f"trained {trainer.step} updates ({args.mode}); validation mse {validation_mse(gen, vx, vy1):.4g} "
          f"(input {identity_mse(vx, vy1):.4g}); checkpoint {out}, log {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------- enhance


def enhance_blended(tmgan_gen, br_gen, eta: float, images: np.ndarray) -> np.ndarray:
    """eta-blend of the two generators on an [N, H, W] stack; a model is skipped when its weight is 0."""
    batch = images[:, None]
    a = enhance(tmgan_gen, batch)[:, 0] if eta > 0 else None
    if eta == 1.0:
        return a
    b = enhance(br_gen, batch)[:, 0]
    return b if eta == 0.0 else blend(a, b, eta)


def cmd_enhance(args) -> int:
    ck = load_checkpoint(args.tmgan)
    eta = ck.config.eta if args.eta is None else args.eta
    if not 0.0 <= eta <= 1.0:
        raise UsageError(f"--eta must lie in [0, 1], got {eta}")
    br = None
    if eta < 1.0:
        if args.br is None:
            raise UsageError(f"eta={eta} < 1 needs the bias-reducing companion checkpoint (--br)")
        br = load_checkpoint(args.br)
        if br.gen.receptive_field != ck.gen.receptive_field:
            log.warning("TMGAN and BR generators differ in architecture")
    src = Path(args.input)
    files = _image_files(src)
    dst = Path(args.output)
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        targets = [dst / f.name for f in files]
    else:
        dst.parent.mkdir(parents=True, exist_ok=True)
        targets = [dst]
    for f, t in zip(files, targets):
        img, sp = read_image(f)
        out = enhance_blended(ck.gen, br.gen if br else None, eta, img[None].astype(np.float64))[0]
        write_image(t, out, sp)
    print(f"enhanced {len(files)} image(s) with eta={eta}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def _named(specs) -> dict:
    out = {}
    for s in specs or []:
        if "=" not in s:
            raise UsageError(f"expected NAME=PATH, got {s!r}")
        name, path = s.split("=", 1)
        if not name or name in out:
            raise UsageError(f"bad or duplicate method name {name!r}")
        out[name] = Path(path)
    return out


def evaluate(truth: Optional[np.ndarray], methods: dict, rois: dict, target: np.ndarray, spacing,
             peak: float = DEFAULT_PEAK_HU):
    """Metric rows and NPS curves. ``methods`` maps name -> [N, H, W] images aligned
    with ``truth``; ``rois`` maps name -> [M, n, n] uniform-region outputs."""
    target_curve = nps_radial(target, spacing)
    rows, curves = [], {"target": target_curve}
    for name in list(dict.fromkeys(list(methods) + list(rois))):
        p = s = nstd = dist = ""
        if name in methods:
            imgs = methods[name]
            if truth is None or imgs.shape != truth.shape:
                raise UsageError(f"method {name!r}: images do not match the ground truth")
            p = _fmt(np.mean([psnr(a, b, peak) for a, b in zip(imgs, truth)]))
            s = _fmt(np.mean([ssim(a, b, peak) for a, b in zip(imgs, truth)]))
        if name in rois:
            r = rois[name]
            curves[name] = nps_radial(r, spacing)
            nstd = _fmt(np.mean([noise_std(x) for x in r]))
            dist = _fmt(nps_distance(curves[name], target_curve))
        rows.append([name, p, s, nstd, dist])
    rows.append(["target", "", "", _fmt(np.mean([noise_std(x) for x in target])),
                 _fmt(nps_distance(target_curve, target_curve))])
    return rows, curves


def cmd_evaluate(args) -> int:
    methods = _named(args.method)
    rois = _named(args.rois)
    if not methods and not rois:
        raise UsageError("nothing to evaluate: give --method and/or --rois")
    truth = names = spacing = None
    if methods:
        if args.truth is None:
            raise UsageError("--method needs --truth")
        tfiles = _image_files(Path(args.truth))
        truth, spacing = _stack(tfiles)
        names = [f.name for f in tfiles]
    imgs = {}
    for name, path in methods.items():
        files = [path / n for n in names] if path.is_dir() else _image_files(path)
        missing = [f for f in files if not f.exists()]
        if missing:
            raise UsageError(f"method {name!r}: missing {missing[0]}")
        imgs[name], _ = _stack(files)
    roi_stacks = {name: _stack(_image_files(path))[0] for name, path in rois.items()}
    target, tsp = _stack(_image_files(Path(args.target_bank)))
    spacing = spacing or tsp
    rows, curves = evaluate(truth, imgs, roi_stacks, target, spacing, args.peak)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, METRICS_HEADER, rows)
    for name, c in curves.items():
        _write_csv(out.with_name(f"{out.stem}_nps_{name}.csv"), NPS_HEADER,
                   [[_fmt(f), _fmt(v)] for f, v in c.to_rows()])
    for r in rows:
        print(",".join(str(v) for v in r))
    return EXIT_OK


# ---------------------------------------------------------------- check


def cmd_check(args) -> int:
    results = checks.run_suites(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tmgan", description="Texture-matching GAN for CT image enhancement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="RunConfig file (key = value lines)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--precision", choices=("train32", "test64"))

    g = sub.add_parser("gen-data", help="generate synthetic phantoms, pairs and texture banks")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a generator (TMGAN or the lambda=0 BR companion)")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--mode", choices=("tmgan", "br"), default="tmgan")
    t.add_argument("--n-updates", type=int, dest="n_updates")
    t.add_argument("--log", help="training log CSV (default: <checkpoint>.log.csv)")
    t.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="apply trained model(s) to an image or a directory of images")
    e.add_argument("--tmgan", required=True)
    e.add_argument("--br")
    e.add_argument("--eta", type=float, help="blend weight of the TMGAN output (default: from checkpoint)")
    e.add_argument("input")
    e.add_argument("output")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="PSNR/SSIM/noise/NPS metrics as CSV")
    v.add_argument("--truth")
    v.add_argument("--method", action="append", metavar="NAME=PATH")
    v.add_argument("--rois", action="append", metavar="NAME=DIR")
    v.add_argument("--target-bank", required=True, dest="target_bank")
    v.add_argument("--out", required=True)
    v.add_argument("--peak", type=float, default=DEFAULT_PEAK_HU)
    v.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("check", help="run self-check suites")
    c.add_argument("suite", nargs="?", default="all", choices=("grad", "theorem", "nps", "all"))
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"tmgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tmgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError, ImageFormatError, OSError, ValueError, FloatingPointError) as exc:
        print(f"tmgan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
