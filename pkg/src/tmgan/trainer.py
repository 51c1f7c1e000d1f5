"""Thresholded alternating optimisation of discriminator and generator, plus checkpoints.

Each outer iteration ``n`` draws one mini-batch. While the discriminator loss
on that batch exceeds ``t_d`` (and fewer than ``n_d`` updates were made) the
discriminator takes an Adam step; then the generator takes exactly one.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import struct
import tempfile
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import RunConfig, TrainConfig
from .losses import discriminator_loss, generator_loss_from_outputs, texture_difference
from .models import DiscriminatorParams, GammaParam, GeneratorParams, generator_forward, siamese_forward
from .tensor import Adam, AdamState, Tape, Tensor

log = logging.getLogger(__name__)

BATCH_STREAM = 0x42415443
PICK_STREAM = 0x5049434B

LOG_HEADER = ("step", "gen_loss", "disc_loss", "n_d", "gamma", "seconds")


@dataclass
class LogRecord:
    step: int
    gen_loss: float
    disc_loss: float
    n_d: int
    gamma: float
    seconds: float

    def row(self) -> list:
        return [str(self.step), repr(self.gen_loss), repr(self.disc_loss), str(self.n_d), repr(self.gamma),
                f"{self.seconds:.6f}"]


class TrainingLog(list):
    """List of :class:`LogRecord`, one per generator update."""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            w.writerows(r.row() for r in self)

    @classmethod
    def from_csv(cls, path) -> "TrainingLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(LogRecord(int(r["step"]), float(r["gen_loss"]), float(r["disc_loss"]), int(r["n_d"]),
                             float(r["gamma"]), float(r["seconds"])) for r in rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self])


class TrainingError(RuntimeError):
    def __init__(self, message: str, log_: TrainingLog):
        super().__init__(message)
        self.log = log_


def build_models(cfg: RunConfig):
    """Fresh (generator, gamma, discriminator) for a run config."""
    dtype = T.dtype_for(cfg.precision)
    gen = GeneratorParams.create(cfg.gen_depth, cfg.gen_width, batch_norm=cfg.gen_batch_norm,
                                 seed=cfg.seed, dtype=dtype)
    gamma = GammaParam.create(cfg.gamma_init, cfg.gamma_learnable, dtype=dtype)
    disc = DiscriminatorParams.create(seed=cfg.seed, dtype=dtype, input_scale=cfg.disc_input_scale,
                                      match_count=gen.parameter_count())
    return gen, gamma, disc


class Trainer:
    """Runs the alternating schedule on arrays x, y1, y2 of shape [K, 1, p, p].

    ``target_bank`` holds target-texture samples [M, p, p]; every batch element
    gets its own pair of distinct bank samples. Subclasses may override
    :meth:`discriminator_objective` / :meth:`generator_objective`.
    """

    def __init__(self, config: TrainConfig, gen: GeneratorParams, gamma: GammaParam, disc: DiscriminatorParams,
                 target_bank: Optional[np.ndarray] = None, gen_state: Optional[AdamState] = None,
                 disc_state: Optional[AdamState] = None):
        self.config = config
        self.gen = gen
        self.gamma = gamma
        self.disc = disc
        self.dtype = T.dtype_for(config.precision)
        if config.loss.lambda_ > 0:
            if target_bank is None or len(target_bank) < 2:
                raise ValueError("lambda > 0 needs a target texture bank with at least two samples")
        self.target_bank = None if target_bank is None else np.asarray(target_bank, dtype=self.dtype)
        self.gen_params = gen.parameters() + gamma.parameters()
        self.gen_opt = Adam(self.gen_params, config.lr_gen, state=gen_state)
        self.disc_opt = Adam(disc.parameters(), config.lr_disc, state=disc_state)
        self._perms: dict = {}

    @property
    def step(self) -> int:
        return self.gen_opt.state.step

    # ------------------------------------------------------------ sampling

    def batch_indices(self, n: int, total: int) -> np.ndarray:
        """Indices for outer iteration ``n``: consecutive slices of per-epoch permutations."""
        b = self.config.batch_size
        out = np.empty(b, dtype=np.int64)
        for i in range(b):
            q = n * b + i
            epoch, pos = divmod(q, total)
            perm = self._perms.get(epoch)
            if perm is None:
                perm = np.random.default_rng([BATCH_STREAM, self.config.seed, epoch]).permutation(total)
                self._perms = {epoch: perm}
            out[i] = perm[pos]
        return out

    def target_pairs(self, n: int, count: int):
        m = len(self.target_bank)
        rng = np.random.default_rng([PICK_STREAM, self.config.seed, n])
        i1 = rng.integers(0, m, count)
        i2 = (i1 + rng.integers(1, m, count)) % m
        return self.target_bank[i1][:, None], self.target_bank[i2][:, None]

    # ------------------------------------------------------------ objectives

    def discriminator_objective(self, real: Tensor, fake: Tensor) -> Tensor:
        return discriminator_loss(real, fake, self.disc)

    def generator_objective(self, x: Tensor, x1: Tensor, x2: Tensor, fake: Optional[Tensor]) -> Tensor:
        return generator_loss_from_outputs(x, x1, x2, self.gamma, self.disc, self.config.loss, fake_diffs=fake)

    # ------------------------------------------------------------ loop

    def run(self, x: np.ndarray, y1: np.ndarray, y2: np.ndarray, until: Optional[int] = None,
            log_path=None, callback: Optional[Callable[[LogRecord], None]] = None) -> TrainingLog:
        """Train from the current step up to ``until`` (default ``n_updates``) generator updates."""
        cfg = self.config
        until = cfg.n_updates if until is None else until
        if len(x) == 0:
            raise ValueError("empty training set")
        x = np.asarray(x, dtype=self.dtype)
        y1 = np.asarray(y1, dtype=self.dtype)
        y2 = np.asarray(y2, dtype=self.dtype)
        adversarial = cfg.loss.lambda_ > 0
        out = TrainingLog()
        fh = writer = None
        if log_path is not None:
            fresh = self.step == 0 or not Path(log_path).exists()
            fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(LOG_HEADER)
        try:
            while self.step < until:
                n = self.step
                t0 = time.perf_counter()
                idx = self.batch_indices(n, len(x))
                xb = Tensor(x[idx])
                with Tape() as gtape:
                    x1, x2 = siamese_forward(self.gen, Tensor(y1[idx]), Tensor(y2[idx]), train=True)
                    fake = texture_difference(x1, x2, self.gamma) if adversarial else None

                n_d, d_val = 0, math.nan
                if adversarial:
                    t1, t2 = self.target_pairs(n, len(idx))
                    real = Tensor(t1 - t2)
                    while True:
                        with Tape() as dtape:
                            d = self.discriminator_objective(real, fake)
                        d_val = float(d.data)
                        if not math.isfinite(d_val):
                            raise TrainingError(f"non-finite discriminator loss at step {n}", out)
                        if not (d_val > cfg.t_d and n_d < cfg.n_d):
                            break
                        self.disc_opt.step(T.backward(dtape, d, self.disc.parameters()))
                        n_d += 1

                with gtape:
                    g = self.generator_objective(xb, x1, x2, fake)
                g_val = float(g.data)
                if not math.isfinite(g_val):
                    raise TrainingError(f"non-finite generator loss at step {n}", out)
                try:
                    self.gen_opt.step(T.backward(gtape, g, self.gen_params))
                except ValueError as exc:
                    raise TrainingError(f"step {n}: {exc}", out) from exc
                rec = LogRecord(n, g_val, d_val, n_d, self.gamma.value, time.perf_counter() - t0)
                out.append(rec)
                if writer is not None:
                    writer.writerow(rec.row())
                if callback is not None:
                    callback(rec)
                if n % 200 == 0:
                    log.debug("step %d gen %.4g disc %.4g n_d %d gamma %.4g", n, g_val, d_val, n_d, rec.gamma)
        finally:
            if fh is not None:
                fh.close()
        return out


def train(config: TrainConfig, train_set, val_set, models, target_bank=None, **kwargs):
    """Functional entry point: returns (generator, gamma, discriminator, log).

    ``train_set`` is a tuple of arrays (x, y1, y2) or a sequence of PatchPair.
    ``val_set`` is accepted for symmetry and used only for logging.
    """
    from .synthdata import stack_pairs

    gen, gamma, disc = models
    if not isinstance(train_set, tuple):
        train_set = stack_pairs(train_set)
    trainer = Trainer(config, gen, gamma, disc, target_bank)
    log_ = trainer.run(*train_set, **kwargs)
    if val_set:
        vs = val_set if isinstance(val_set, tuple) else stack_pairs(val_set)
        log.info("validation mse %.4g (identity %.4g)", validation_mse(gen, *vs), identity_mse(*vs))
    return gen, gamma, disc, log_


def validation_mse(gen: GeneratorParams, x: np.ndarray, y1: np.ndarray, y2: Optional[np.ndarray] = None) -> float:
    """Mean squared error of h(y1) against x, evaluated without recording."""
    dtype = gen.kernels[0].dtype
    est = generator_forward(gen, Tensor(np.asarray(y1, dtype=dtype))).data
    return float(np.mean((est.astype(np.float64) - x) ** 2))


def identity_mse(x: np.ndarray, y1: np.ndarray, y2: Optional[np.ndarray] = None) -> float:
    return float(np.mean((np.asarray(y1, dtype=np.float64) - x) ** 2))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TMGN"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    gen: GeneratorParams
    gamma: GammaParam
    disc: DiscriminatorParams
    gen_state: AdamState
    disc_state: AdamState

    @property
    def step(self) -> int:
        return self.gen_state.step


def _state_arrays(state: AdamState) -> list:
    return [np.array([state.step], dtype="<i8")] + list(state.first_moment) + list(state.second_moment)


def _checkpoint_arrays(gen, gamma, disc, gen_state, disc_state) -> list:
    arrays = [p.data for p in gen.parameters()]
    for st in gen.bn_stats:
        arrays += [st.mean, st.var]
    arrays.append(gamma.log_gamma.data)
    arrays += [p.data for p in disc.parameters()]
    return arrays + _state_arrays(gen_state) + _state_arrays(disc_state)


def save_checkpoint(path, config: RunConfig, gen: GeneratorParams, gamma: GammaParam, disc: DiscriminatorParams,
                    gen_state: AdamState, disc_state: AdamState) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = config.dumps().encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    arrays = _checkpoint_arrays(gen, gamma, disc, gen_state, disc_state)
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.asarray(a)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        tag = _DTYPE_TAGS[np.dtype(a.dtype.str.replace(">", "<").replace("=", "<"))]
        payload = np.ascontiguousarray(a).tobytes()
        buf.write(struct.pack("<BI", tag, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    body = buf.getvalue()
    data = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, validating magic, version, lengths, shapes and checksum."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a TMGN checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated file)")
    (clen,) = r.unpack("<I")
    try:
        config = RunConfig.loads(r.take(clen).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    (count,) = r.unpack("<I")
    arrays = []
    for _ in range(count):
        tag, ndim = r.unpack("<BI")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        dt = _TAG_DTYPES[tag]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: tensor length does not match its shape")
        arrays.append(np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("=")))
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")

    gen, gamma, disc = build_models(config)
    gen_state = AdamState.zeros_like(gen.parameters() + gamma.parameters())
    disc_state = AdamState.zeros_like(disc.parameters())
    expected = _checkpoint_arrays(gen, gamma, disc, gen_state, disc_state)
    if len(arrays) != len(expected):
        raise CheckpointError(f"{path}: expected {len(expected)} tensors, found {len(arrays)}")
    for dst, src in zip(expected, arrays):
        if dst.shape != src.shape or dst.dtype != src.dtype:
            raise CheckpointError(f"{path}: tensor {src.shape}/{src.dtype} does not fit {dst.shape}/{dst.dtype}")
    # all checks passed; only now populate the models
    for dst, src in zip(expected, arrays):
        dst[...] = src
    d_block = 1 + 2 * len(disc_state.first_moment)
    g_block = 1 + 2 * len(gen_state.first_moment)
    gen_state.step = int(expected[-d_block - g_block][0])
    disc_state.step = int(expected[-d_block][0])
    return Checkpoint(config, gen, gamma, disc, gen_state, disc_state)
