"""Run configuration: defaults, optional preset, JSON file, then command-line overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .gan_core import GANConfig
from .style import StyleConfig
from .text_encoder import EncoderConfig
from .trainer import TrainingConfig

RUNS_ENV = "TXT2IM_RUNS_DIR"


@dataclass
class DatasetSection:
    classes: int = 8
    per_class: int = 50
    resolution: int = 64
    seed: int = 7


@dataclass
class EvalSection:
    mode: str = "background"  # style feature used to define same-style pairs
    k: int = 0  # 0 -> default_k(N)
    folds: int = 5
    pairs_per_fold: int = 200
    samples_per_caption: int = 4
    seed: int = 0


SECTIONS = {
    "dataset": DatasetSection,
    "encoder": EncoderConfig,
    "gan": GANConfig,
    "trainer": TrainingConfig,
    "style": StyleConfig,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gan: GANConfig = field(default_factory=GANConfig)
    trainer: TrainingConfig = field(default_factory=TrainingConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# Small enough to train every stage on one CPU core in minutes.
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "full": {},
    "desk": {
        "dataset": {"classes": 8, "per_class": 50, "resolution": 32},
        "encoder": {
            "embed_dim": 64,
            "max_len": 48,
            "conv_channels": [64, 64],
            "pool": 2,
            "rnn_hidden": 64,
            "resolution": 32,
            "image_channels": [16, 32, 64],
            "word_dropout": 0.5,
            "grayscale_prob": 0.5,
            "lr": 0.0005,
            "epochs": 80,
        },
        "gan": {"z_dim": 16, "text_dim": 64, "cond_dim": 32, "resolution": 32, "base_channels": 64},
        "trainer": {"batch_size": 16, "epochs": 50, "checkpoint_every": 10, "snapshot_every": 10},
        "style": {"batch_size": 64, "epochs": 15, "steps_per_epoch": 40},
    },
}


def _coerce(value: str, like: Any) -> Any:
    """Parse a command-line string into the type of the default ``like``."""
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


def _merge(base: dict, overrides: Mapping, where: str) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if key not in base:
            raise ValueError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ValueError(f"config section {where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _build(d: Mapping) -> RunConfig:
    kwargs = {"name": d["name"], "seed": d["seed"]}
    for name, cls in SECTIONS.items():
        section = dict(d[name])
        for f in fields(cls):
            if isinstance(section.get(f.name), list):
                section[f.name] = tuple(section[f.name])
        kwargs[name] = cls(**section)
    return RunConfig(**kwargs)


def resolve_config(
    preset: str | None = None,
    config_file: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    assignments: list[str] | None = None,
) -> RunConfig:
    """defaults -> preset -> JSON file -> ``overrides`` (dotted keys) -> ``section.key=value`` strings."""
    d = RunConfig().to_dict()
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        d = _merge(d, PRESETS[preset], "")
    if config_file is not None:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {config_file} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {config_file} must hold a JSON object")
        d = _merge(d, loaded, "")
    flat = dict(overrides or {})
    for item in assignments or []:
        if "=" not in item:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        flat[key.strip()] = value
    for key, value in flat.items():
        if value is None:
            continue
        parts = key.split(".")
        target = d
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise ValueError(f"unknown config key {key}")
            target = target[p]
        if parts[-1] not in target or isinstance(target[parts[-1]], dict):
            raise ValueError(f"unknown config key {key}")
        default = target[parts[-1]]
        if isinstance(value, str) and not isinstance(default, str):
            value = _coerce(value, tuple(default) if isinstance(default, list) else default)
        target[parts[-1]] = value
    return _build(d)


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    """Propagate a top-level seed into every section that has one (dataset keeps its own)."""
    return replace(
        config,
        seed=seed,
        encoder=replace(config.encoder, seed=seed),
        trainer=replace(config.trainer, seed=seed),
        style=replace(config.style, seed=seed),
        eval=replace(config.eval, seed=seed),
    )


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def run_dir(name: str) -> Path:
    return runs_root() / name
