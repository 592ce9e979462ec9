"""Run configuration: nested dataclasses loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .schedule import ConfigError
from .synthcorpus import CorpusSpec, SpecError

KINDS = ("vg-dpm", "lvg-dpm", "vg-fm", "lvg-fm")


@dataclass(frozen=True)
class PipelineKind:
    model: str  # "dpm" | "fm"
    space: str  # "feature" | "latent"

    @classmethod
    def parse(cls, name: str) -> "PipelineKind":
        if name not in KINDS:
            raise ConfigError(f"unknown kind {name!r}; expected one of {KINDS}")
        prefix, model = name.split("-")
        return cls(model, "latent" if prefix == "lvg" else "feature")

    @property
    def name(self) -> str:
        return f"{'lvg' if self.space == 'latent' else 'vg'}-{self.model}"

    @property
    def role(self) -> str:
        return "score" if self.model == "dpm" else "vfield"


@dataclass
class ScheduleConfig:
    L: int = 20
    beta_min: float = 1e-4
    beta_max: float = 0.06


@dataclass
class ModelConfig:
    latent_dim: int = 32
    hidden: int = 128
    latent_hidden: int = 128
    depth: int = 3
    speaker_dim: int = 16
    time_dim: int = 32
    time_hidden: int = 64
    time_scale: float = 100.0
    ae_hidden: int = 128
    ae_context: int = 2
    disc_hidden: int = 64
    render_hop: int = 16
    dtype: str = "float32"


@dataclass
class TrainConfig:
    ae_epochs: int = 300
    gen_epochs: int = 500
    batch_size: int = 8
    lr: float = 2e-4
    ae_lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 10.0
    lam: float = 45.0
    ae_objective: str = "adversarial"
    per_dim_kl: bool = False
    sigma: float = 0.01


@dataclass
class SamplerConfig:
    lprime: int = 18
    noise_frac: float = 0.7
    steps: int = 10
    final_noise: bool = False


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    kind: str = "lvg-fm"

    def validate(self) -> "RunConfig":
        try:
            self.corpus.validate()
        except SpecError as e:
            raise ConfigError(str(e)) from e
        PipelineKind.parse(self.kind)
        s = self.schedule
        if s.L < 1 or not (0 < s.beta_min <= s.beta_max < 1):
            raise ConfigError("invalid schedule")
        if not 1 <= self.sampler.lprime <= s.L:
            raise ConfigError(f"lprime must lie in [1, {s.L}]")
        if not 0 <= self.sampler.noise_frac <= 1:
            raise ConfigError("noise_frac must lie in [0, 1]")
        if self.sampler.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.train.ae_objective not in ("adversarial", "regular"):
            raise ConfigError("ae_objective must be 'adversarial' or 'regular'")
        if self.train.lam <= 0 or self.train.batch_size < 1 or self.train.sigma < 0:
            raise ConfigError("invalid training hyperparameters")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.model.latent_dim >= self.corpus.dim:
            raise ConfigError("latent_dim must be below the feature dim")
        if self.model.time_dim % 2:
            raise ConfigError("time_dim must be even")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {
            "corpus": CorpusSpec,
            "schedule": ScheduleConfig,
            "model": ModelConfig,
            "train": TrainConfig,
            "sampler": SamplerConfig,
        }
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                klass = sections[key]
                bad = set(value) - {f.name for f in fields(klass)}
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                kwargs[key] = klass(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(data)

    def override(self, **sections) -> "RunConfig":
        """Return a copy with per-section field overrides, e.g. sampler={"steps": 3}."""
        kwargs = {}
        for key, changes in sections.items():
            if isinstance(changes, dict):
                kwargs[key] = replace(getattr(self, key), **changes)
            else:
                kwargs[key] = changes
        return replace(self, **kwargs).validate()
