"""Run configuration: one flat, JSON-serialisable record of every knob.

Two presets exist.  ``desk`` (64 x 64 images, five grid sizes 4..8, six
stages, 2000 mask epochs) is sized for a laptop CPU; ``paper`` uses 224 x 224
images, ten grid sizes 7..16, fifteen stages and 10^4 epochs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .classifier import TrainConfig
from .errors import ConfigError
from .hierarchy import SizeSchedule
from .psmi import PsmiConfig
from .spi import CpfConfig
from .synth import SynthConfig


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    # hierarchy
    image_size: int = 64
    n_sizes: int = 5
    grid_offset: int = 3
    stages: int = 6
    benchmark: int = 1
    epsilon: int = 3
    use_psmi: bool = True
    # mask training
    epochs: int = 2000
    learning_rate: float = 1e-2
    init_value: float = 0.5
    alpha: float = 5e-3
    beta: float = 0.08
    lam: float = 1.0
    check_every: int = 50
    selection: str = "cpf"
    scores: str = "probabilities"  # or "logits"
    # data and classifier
    n_train: int = 500
    n_test: int = 100
    train_epochs: int = 30
    batch_size: int = 25
    train_learning_rate: float = 0.01
    weight_decay: float = 1e-4
    train_brightness: tuple[float, float] = (0.2, 1.0)
    lesion_radius: tuple[float, float] = (12.0, 18.0)  # pixels
    # paths (optional)
    data_dir: str | None = None
    checkpoint: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        self.train_brightness = tuple(float(v) for v in self.train_brightness)
        self.lesion_radius = tuple(float(v) for v in self.lesion_radius)
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.scores not in ("probabilities", "logits"):
            raise ConfigError(f"scores must be 'probabilities' or 'logits', got {self.scores!r}")
        if self.n_train < 2 or self.n_test < 0 or self.seed < 0:
            raise ConfigError("n_train must be >= 2, n_test and seed >= 0")
        # build the component configs once so their own checks run
        self.schedule()
        self.cpf()
        self.psmi().check(self.n_sizes)
        self.train_config()
        self.synth_config(1, 1, 0)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        return cls(**{**PRESETS[name], "preset": name, **overrides})

    def schedule(self) -> SizeSchedule:
        return SizeSchedule(self.image_size, self.n_sizes, self.stages, self.benchmark, self.grid_offset)

    def cpf(self, **overrides) -> CpfConfig:
        cfg = CpfConfig(self.alpha, self.beta, self.epochs, self.learning_rate, self.lam,
                        self.init_value, self.check_every, self.selection, self.scores == "probabilities")
        return replace(cfg, **overrides) if overrides else cfg

    def psmi(self) -> PsmiConfig:
        return PsmiConfig(self.epsilon, self.benchmark)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.train_epochs, self.batch_size, self.train_learning_rate,
                           self.weight_decay, seed=self.seed, brightness=tuple(self.train_brightness))

    def synth_config(self, n_normal: int, n_diseased: int, seed: int) -> SynthConfig:
        return SynthConfig(self.image_size, n_normal, n_diseased, lesion_radius=self.lesion_radius, seed=seed)

    def with_overrides(self, **overrides) -> "RunConfig":
        known = {f.name for f in fields(self)}
        bad = set(overrides) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        base = PRESETS.get(d.get("preset", "desk"), {})
        return cls(**{**base, **d})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)


PRESETS: dict[str, dict] = {
    "desk": {},
    "paper": {
        "image_size": 224,
        "n_sizes": 10,
        "grid_offset": 6,
        "stages": 15,
        "benchmark": 1,
        "epsilon": 8,
        "epochs": 10_000,
        "lesion_radius": (42.0, 63.0),
    },
}
