"""Experiment configuration: JSON in, validated dataclasses out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .contrastive import DEFAULT_TEMPERATURE
from .data import SyntheticConfig
from .errors import InvalidConfigError, MCAError
from .masking import MODES
from .model import ModelConfig

DEFAULT_SPARSITIES = (0.0, 0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    max_lr: float = 1e-4
    warmup_steps: int = 2000
    epochs: int = 32
    seed: int = 0
    keep_checkpoints: int = 1  # best-k by test loss; 0 keeps every epoch
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.max_lr <= 0 or self.warmup_steps < 0 or self.epochs < 0 or self.keep_checkpoints < 0:
            raise InvalidConfigError("max_lr > 0, warmup_steps >= 0, epochs >= 0, keep_checkpoints >= 0")


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.1
    test_size: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class ProbeConfig:
    channel: str = "fusion"
    steps: int = 2000
    lr_regression: float | None = None
    lr_classification: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticConfig | None = None
    manifest: str | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.synthetic is None) == (self.manifest is None):
            raise InvalidConfigError("data needs exactly one of 'synthetic' or 'manifest'")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "MCA"
    model: ModelConfig = field(default_factory=ModelConfig)
    temperature: float = DEFAULT_TEMPERATURE
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(synthetic=SyntheticConfig()))
    sparsity: float = 0.0
    sparsity_seed: int = 0
    split: SplitConfig = field(default_factory=SplitConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    sweep_sparsities: tuple[float, ...] = DEFAULT_SPARSITIES
    sweep_modes: tuple[str, ...] = MODES

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfigError(f"unknown mode {self.mode!r}")
        if self.model.mode != self.mode:
            object.__setattr__(self, "model", dataclasses.replace(self.model, mode=self.mode))
        if self.temperature <= 0:
            raise InvalidConfigError("temperature must be positive")
        for s in (self.sparsity, *self.sweep_sparsities):
            if not 0.0 <= s < 1.0:
                raise InvalidConfigError(f"sparsity {s} outside [0, 1)")
        for m in self.sweep_modes:
            if m not in MODES:
                raise InvalidConfigError(f"unknown sweep mode {m!r}")
        object.__setattr__(self, "sweep_sparsities", tuple(float(s) for s in self.sweep_sparsities))
        object.__setattr__(self, "sweep_modes", tuple(self.sweep_modes))

    # -- (de)serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canon.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            return _build(cls, raw, "config")
        except MCAError:
            raise
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise InvalidConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def with_run(self, mode: str | None = None, sparsity: float | None = None) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            mode=self.mode if mode is None else mode,
            model=dataclasses.replace(self.model, mode=self.mode if mode is None else mode),
            sparsity=self.sparsity if sparsity is None else float(sparsity),
        )


_NESTED = {
    ("ExperimentConfig", "model"): ModelConfig,
    ("ExperimentConfig", "training"): TrainingConfig,
    ("ExperimentConfig", "data"): DataConfig,
    ("ExperimentConfig", "split"): SplitConfig,
    ("ExperimentConfig", "probe"): ProbeConfig,
    ("DataConfig", "synthetic"): SyntheticConfig,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise InvalidConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls.__name__, name))
        if sub is not None and value is not None:
            value = _build(sub, value, f"{where}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    if cls is ExperimentConfig and "model" in kwargs and "mode" in kwargs:
        kwargs["model"] = dataclasses.replace(kwargs["model"], mode=kwargs["mode"])
    return cls(**kwargs)


def desk_config(mode: str = "MCA", **overrides) -> ExperimentConfig:
    """Small synthetic setup that trains on one CPU core in minutes."""
    base = ExperimentConfig(
        mode=mode,
        model=ModelConfig(mode=mode, width=64, depth=2, heads=4, ff_multiplier=4, tokens_per_channel=2),
        training=TrainingConfig(batch_size=32, max_lr=1e-3, warmup_steps=200, epochs=6, seed=0),
        data=DataConfig(synthetic=SyntheticConfig(samples=4608, latent_dim=8, noise=0.3), seed=0),
        split=SplitConfig(test_size=512, seed=0),
    )
    return dataclasses.replace(base, **overrides) if overrides else base
