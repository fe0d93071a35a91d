"""Experiment configuration read from a JSON text file.

Top-level keys are the fields of :class:`ExperimentConfig`; ``soft`` and
``hard`` hold overrides for the learner configs and ``env_params`` is passed
to the environment constructor. Unknown keys anywhere are errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..trainer import MODES, HardConfig, SoftConfig

# return thresholds for steps-to-threshold; none are given for these tasks,
# so they sit a little below each environment's best achievable return
DEFAULT_THRESHOLDS = {"rps_chain": 18.0, "rotmirror": -60.0, "button_perm": 4.0}


@dataclass
class ExperimentConfig:
    env: str = "rps_chain"
    mode: str = "soft"
    seeds: list = field(default_factory=lambda: list(range(10)))
    total_steps: int = 20_000
    eval_every: int | None = None
    eval_episodes: int = 20
    threshold: float | None = None
    window: int = 5
    env_params: dict = field(default_factory=dict)
    soft: SoftConfig = field(default_factory=SoftConfig)
    hard: HardConfig = field(default_factory=HardConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.total_steps < 1 or self.eval_episodes < 1 or self.window < 1:
            raise ConfigError("total_steps, eval_episodes and window must be positive")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if not self.seeds or any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of nonnegative integers")
        self.soft.validate()
        self.hard.validate()

    @property
    def r_thr(self) -> float:
        if self.threshold is not None:
            return float(self.threshold)
        if self.env not in DEFAULT_THRESHOLDS:
            raise ConfigError(f"no default threshold for {self.env!r}; set 'threshold'")
        return DEFAULT_THRESHOLDS[self.env]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["soft"]["orders"] = list(out["soft"]["orders"])
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _sub(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    data = dict(data)
    if "orders" in data:
        data["orders"] = tuple(data["orders"])
    return replace(cls(), **data)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    data = dict(data)
    try:
        data["soft"] = _sub(SoftConfig, data.get("soft", {}), "soft")
        data["hard"] = _sub(HardConfig, data.get("hard", {}), "hard")
        if not isinstance(data.get("env_params", {}), dict):
            raise ConfigError("env_params must be a mapping")
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return from_dict(data)
