"""Run configuration: one JSON file, command-line overrides on top."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .burgers import BurgersConfig
from .env import EnvConfig
from .ppo import PpoConfig

DEFAULT_TRAIN_MUS = tuple(round(0.1 * i, 10) for i in range(11))
DEFAULT_TEST_MUS = (0.15, 0.55, 0.95)


@dataclass(frozen=True)
class RunConfig:
    burgers: BurgersConfig = field(default_factory=BurgersConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    rank: int = 10
    p: int = 4
    seed: int = 0
    train_mus: tuple = DEFAULT_TRAIN_MUS
    test_mus: tuple = DEFAULT_TEST_MUS
    eval_seeds: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.env.episode_length != self.ppo.episode_length:
            raise ValueError("env.episode_length and ppo.episode_length must agree")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_mus"] = list(self.train_mus)
        d["test_mus"] = list(self.test_mus)
        return d

    def hash(self) -> str:
        """Digest of the effective configuration (``workers`` excluded)."""
        d = self.to_dict()
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def metadata(self, **extra) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed, "tool_version": __version__,
                "config": self.to_dict(), **extra}


_SECTIONS = {"burgers": BurgersConfig, "env": EnvConfig, "ppo": PpoConfig}


def _section(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _section(cls, data.pop(name, {}) or {})
    for key in ("train_mus", "test_mus"):
        if key in data:
            data[key] = tuple(float(m) for m in data[key])
    top = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    unknown = set(data) - top
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**kwargs, **data)


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (or defaults) and apply non-None overrides.

    Overrides may use dotted keys for sections, e.g. ``{"ppo.total_timesteps": 1000}``.
    ``seed`` also sets ``ppo.seed``.
    """
    data = json.loads(Path(path).read_text()) if path else {}
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            data.setdefault(section, {})[name] = value
        else:
            data[key] = value
        if key == "seed":
            data.setdefault("ppo", {})["seed"] = value
    if "seed" in data and "seed" not in (data.get("ppo") or {}):
        data.setdefault("ppo", {})["seed"] = data["seed"]
    return from_dict(data)
