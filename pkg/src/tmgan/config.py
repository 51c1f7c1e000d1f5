"""Training configuration and the line-oriented ``key = value`` run-config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossConfig
from .synthdata import DEFAULT_SPACING_MM, DeformationSpec, TextureSpec
from .tensor import PRECISIONS


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    eta: float = 0.3
    t_d: float = 0.2
    n_d: int = 1
    n_updates: int = 2000
    lr_gen: float = 3e-5
    lr_disc: float = 3e-6
    batch_size: int = 32
    seed: int = 0
    precision: str = "train32"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.t_d <= 0:
            raise ValueError(f"t_d must be > 0, got {self.t_d}")
        if self.n_d < 1:
            raise ValueError(f"n_d must be >= 1, got {self.n_d}")
        if self.n_updates < 1:
            raise ValueError(f"n_updates must be >= 1, got {self.n_updates}")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")


PRESETS = {
    "denoise": {"alpha": 0.5, "eta": 0.3, "n_d": 1, "deform_mode": "identity"},
    "sharpen": {"alpha": 1.0, "eta": 1.0, "n_d": 5, "deform_mode": "gaussian_blur"},
}


@dataclass
class RunConfig:
    """Every knob the command-line pipeline needs, with desk-scale defaults."""

    preset: str = "denoise"
    # objective and alternating updates
    lambda_: float = 0.04
    sigma_hu: float = 50.0
    alpha: float = 0.5
    adversarial: str = "nonsaturating"
    eta: float = 0.3
    t_d: float = 0.2
    n_d: int = 1
    n_updates: int = 2000
    lr_gen: float = 3e-5
    lr_disc: float = 3e-6
    batch_size: int = 32
    seed: int = 0
    precision: str = "train32"
    # models
    gen_depth: int = 7
    gen_width: int = 32
    gen_batch_norm: bool = False
    disc_input_scale: float = 0.01
    gamma_init: float = 1.0
    gamma_learnable: bool = True
    # textures
    noise_std_hu: float = 70.0
    noise_kind: str = "white"
    noise_cutoff: float = 0.25
    target_std_hu: float = 30.0
    target_kind: str = "bandpass"
    target_cutoff: float = 0.15
    target_bank_size: int = 256
    # forward model
    deform_mode: str = "identity"
    deform_sigma_mm: tuple = (0.244, 0.244)
    pixel_spacing_mm: float = DEFAULT_SPACING_MM
    # data
    phantom_count: int = 16
    phantom_size: int = 128
    n_shapes: int = 6
    patch_size: int = 32
    pairs_per_phantom: int = 64
    split_fraction: float = 0.97
    test_phantom_count: int = 2
    water_roi_count: int = 32
    water_roi_size: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        self.train_config()
        self.noise_spec()
        self.target_spec()
        self.deformation()
        if self.gen_depth < 2 or self.gen_width < 1:
            raise ValueError("gen_depth must be >= 2 and gen_width >= 1")
        if self.gamma_init <= 0:
            raise ValueError("gamma_init must be positive")
        if self.patch_size > self.phantom_size or self.patch_size < 8:
            raise ValueError("patch_size must lie in [8, phantom_size]")
        if self.water_roi_size & (self.water_roi_size - 1):
            raise ValueError("water_roi_size must be a power of two")
        if self.target_bank_size < 2:
            raise ValueError("target_bank_size must be >= 2")
        return self

    @classmethod
    def for_preset(cls, preset: str, **overrides) -> "RunConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        values = dict(PRESETS[preset], preset=preset)
        values.update(overrides)
        return cls(**values)

    def train_config(self) -> TrainConfig:
        loss = LossConfig(self.lambda_, self.sigma_hu, self.alpha, self.adversarial)
        return TrainConfig(loss, self.eta, self.t_d, self.n_d, self.n_updates, self.lr_gen, self.lr_disc,
                           self.batch_size, self.seed, self.precision)

    def noise_spec(self) -> TextureSpec:
        return TextureSpec(self.noise_std_hu, self.noise_kind, self.noise_cutoff, seed=self.seed)

    def target_spec(self) -> TextureSpec:
        return TextureSpec(self.target_std_hu, self.target_kind, self.target_cutoff, seed=self.seed)

    def deformation(self) -> DeformationSpec:
        return DeformationSpec(self.deform_mode, tuple(self.deform_sigma_mm))

    @property
    def spacing(self) -> tuple:
        return (self.pixel_spacing_mm, self.pixel_spacing_mm)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ text format

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{_KEY_OF.get(f.name, f.name)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, **overrides) -> "RunConfig":
        """Parse ``key = value`` lines; ``preset`` is applied before the other keys."""
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            name = _NAME_OF.get(key, key)
            if name not in _FIELDS:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            raw[name] = _parse(_FIELDS[name], value, key)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        preset = raw.pop("preset", "denoise")
        return cls.for_preset(preset, **raw)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"), **overrides)

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


_KEY_OF = {"lambda_": "lambda"}
_NAME_OF = {v: k for k, v in _KEY_OF.items()}
_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse(f, value: str, key: str):
    default = f.default
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [float(p) for p in value.split(",")]
            return tuple(parts * 2) if len(parts) == 1 else tuple(parts)
        return value
    except ValueError:
        raise ValueError(f"bad value for {key!r}: {value!r}") from None
