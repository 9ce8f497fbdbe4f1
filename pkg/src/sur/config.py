"""JSON run configuration with strict validation.

The document is versioned and closed: unknown keys anywhere are rejected so
a typo cannot silently fall back to a default. Sections are optional; the
trainer section nests the loss term settings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from .encoders import LLM_PROFILES
from .errors import ConfigError
from .tnsio import read_json
from .trainer import TrainConfig

SCHEMA_VERSION = 1

_TOP_KEYS = {"schema_version", "seed", "encoders", "diffusion", "adapter", "train", "loss", "paths"}
_ENCODER_KEYS = {"seed", "profile", "d_en", "l_max", "vocab_size"}
_DIFFUSION_KEYS = {"seed", "steps", "sigma_min", "sigma_max", "hidden"}
_ADAPTER_KEYS = {"seed"}
_PATH_KEYS = {"data", "encoders", "denoiser", "out"}


@dataclass
class Config:
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    encoders: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    adapter: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)


def _reject_unknown(section: str, doc: dict, allowed: set) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} key: {sorted(unknown)[0]}")


def _check_int(section: str, doc: dict, key: str, minimum: int) -> None:
    if key in doc:
        v = doc[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
            raise ConfigError(f"{section}.{key} must be an integer >= {minimum}, got {v!r}")


def parse_config(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("config", doc, _TOP_KEYS)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must equal {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    encoders = dict(doc.get("encoders", {}))
    _reject_unknown("encoders", encoders, _ENCODER_KEYS)
    _check_int("encoders", encoders, "seed", 0)
    _check_int("encoders", encoders, "d_en", 1)
    _check_int("encoders", encoders, "l_max", 1)
    _check_int("encoders", encoders, "vocab_size", 3)
    if "profile" in encoders and encoders["profile"] not in LLM_PROFILES:
        raise ConfigError(
            f"encoders.profile must be one of {sorted(LLM_PROFILES)}, got {encoders['profile']!r}")

    diffusion = dict(doc.get("diffusion", {}))
    _reject_unknown("diffusion", diffusion, _DIFFUSION_KEYS)
    _check_int("diffusion", diffusion, "seed", 0)
    _check_int("diffusion", diffusion, "steps", 2)
    _check_int("diffusion", diffusion, "hidden", 1)
    for key in ("sigma_min", "sigma_max"):
        if key in diffusion and not 0.0 < float(diffusion[key]) < 1.0:
            raise ConfigError(f"diffusion.{key} must lie in (0, 1), got {diffusion[key]!r}")

    adapter = dict(doc.get("adapter", {}))
    _reject_unknown("adapter", adapter, _ADAPTER_KEYS)
    _check_int("adapter", adapter, "seed", 0)

    paths = dict(doc.get("paths", {}))
    _reject_unknown("paths", paths, _PATH_KEYS)

    train_doc = dict(doc.get("train", {}))
    if "loss" not in train_doc and "loss" in doc:
        train_doc["loss"] = doc["loss"]
    if "seed" not in train_doc:
        train_doc["seed"] = seed
    train = TrainConfig.from_dict(train_doc)

    return Config(seed=seed, train=train, encoders=encoders,
                  diffusion=diffusion, adapter=adapter, paths=paths)


def load_config(path) -> Config:
    cfg = parse_config(read_json(path))
    env_seed = os.environ.get("SUR_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"SUR_SEED must be an integer, got {env_seed!r}") from exc
        cfg.seed = seed
        cfg.train = replace(cfg.train, seed=seed)
    return cfg
