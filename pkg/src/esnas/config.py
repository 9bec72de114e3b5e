"""Run configuration: one JSON document describing a whole experiment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .controller import CONTROLLERS
from .environments import ENVIRONMENTS, Environment, make_env
from .errors import ConfigError
from .es_core import ESConfig
from .policy import PolicyDims, WeightCoding
from .search_space import canonical_json

TOP_LEVEL = {"environment", "coding", "controller", "es", "seeds", "output_dir", "backend"}


@dataclass
class RunConfig:
    environment: dict[str, Any]
    coding: dict[str, Any]
    controller: dict[str, Any]
    es: dict[str, Any] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    backend: dict[str, Any] = field(default_factory=lambda: {"kind": "serial", "workers": 1})

    def __post_init__(self) -> None:
        if self.environment.get("name") not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.environment.get('name')!r}")
        if self.controller.get("kind") not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller.get('kind')!r}; "
                              f"expected one of {sorted(CONTROLLERS)}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        try:
            self.coding_obj()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad coding: {exc}") from None
        self.es_config()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - TOP_LEVEL
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"environment", "coding", "controller"} - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "environment": self.environment,
            "coding": self.coding,
            "controller": self.controller,
            "es": self.es,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "backend": self.backend,
        }

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def make_env(self) -> Environment:
        return make_env(self.environment)

    def coding_obj(self) -> WeightCoding:
        return WeightCoding.from_dict(self.coding)

    def dims(self, env: Environment) -> PolicyDims:
        return PolicyDims(env.spec.state_dim, env.spec.action_dim)

    def es_config(self) -> ESConfig:
        try:
            return ESConfig.from_dict(self.es)
        except TypeError as exc:
            raise ConfigError(f"bad ES config: {exc}") from None

    def controller_params(self) -> dict[str, Any]:
        return dict(self.controller.get("params", {}))
