"""Pipeline configuration from a flat dotted-key text file.

The file is TOML restricted to ``section.key = value`` lines, e.g.::

    model.d_model = 16
    train.epochs = 80
    sim.onset_range = [60, 120]

Unknown keys are rejected with an error naming the key.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augmentation import AugmentConfig
from .core import FixationConfig, GazeError
from .evaluation import EvalConfig
from .model import ModelConfig
from .segmentation import CleaningRules
from .simulator import SimConfig
from .sweep import SweepConfig
from .training import LossConfig, TrainConfig

SEED_ENV = "TIMEGAZER_SEED"
ALIASES = {"loss.lambda": "loss.lam"}


class ConfigError(GazeError):
    pass


@dataclass(frozen=True)
class IOConfig:
    trials: str = "trials.jsonl"
    segmented: str = "segmented.jsonl"
    segment_report: str = "segment_report.csv"
    augmented: str = "augmented.jsonl"
    checkpoint: str = "model.tgzr"
    train_log: str = "train_log.csv"
    eval_report: str = "eval_report.json"


SECTIONS: dict[str, type] = {
    "sim": SimConfig,
    "fixation": FixationConfig,
    "cleaning": CleaningRules,
    "augment": AugmentConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "io": IOConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    fixation: FixationConfig = field(default_factory=FixationConfig)
    cleaning: CleaningRules = field(default_factory=CleaningRules)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return out

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(
            self,
            sim=dataclasses.replace(self.sim, rng_seed=seed),
            augment=dataclasses.replace(self.augment, rng_seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


def all_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]


def _flatten(tree: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str) -> Any:
    """Parse a CLI override value with TOML literal rules, else keep the string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def build(values: dict[str, Any]) -> PipelineConfig:
    known = set(all_keys())
    per_section: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, value in values.items():
        key = ALIASES.get(key, key)
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        per_section[section][name] = tuple(value) if isinstance(value, list) else value
    try:
        parts = {s: SECTIONS[s](**kw) for s, kw in per_section.items()}
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return PipelineConfig(**parts)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                env: dict[str, str] | None = None) -> PipelineConfig:
    """Read ``path`` (optional), apply ``overrides``, then the seed env var."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            tree = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values.update(_flatten(tree))
    values.update(overrides or {})
    cfg = build(values)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = cfg.with_seed(int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg


def dumps(cfg: PipelineConfig) -> str:
    lines = []
    for key, value in cfg.flat().items():
        if isinstance(value, tuple):
            value = list(value)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = f'"{value}"'
        else:
            text = repr(value).replace("(", "[").replace(")", "]")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
