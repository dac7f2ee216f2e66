"""Experiment configuration files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from ..model import ModelSpec

FUNCTIONALS = ("id", "square", "cosine")
OBSERVABLES = ("square", "K", "constant", "b")


class ConfigError(ValueError):
    pass


@dataclass
class Probes:
    x: list = field(default_factory=lambda: [[-1.0], [0.0], [1.0]])
    mean: list = field(default_factory=lambda: [[0.0]])
    y: list = field(default_factory=lambda: [[-1.0], [0.5], [2.0]])


@dataclass
class ExperimentConfig:
    model: ModelSpec
    epsilons: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    N: int = 1000
    T: float = 1.0
    delta0: float | None = None  # dt = eps * delta0; None uses the stability ratio
    limit_dt: float = 0.01
    seeds: list = field(default_factory=lambda: list(range(8)))
    functionals: list = field(default_factory=lambda: ["id", "square"])
    p: int = 2
    observable: str = "square"
    block_exponent: float = 2.0 / 3.0
    invariant_samples: int = 20000
    paths: int = 32
    budget: int = 1000
    probes: Probes = field(default_factory=Probes)
    n_doubling: bool = False
    grid: dict = field(default_factory=lambda: {"nx": 5, "nm": 3})

    def __post_init__(self):
        eps = [float(e) for e in self.epsilons]
        if not eps:
            raise ConfigError("at least one epsilon is required")
        if any(not 0 < e <= 1 for e in eps):
            raise ConfigError(f"epsilons must lie in (0, 1], got {eps}")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError(f"epsilons must be strictly decreasing, got {eps}")
        self.epsilons = eps
        if self.N < 1 or self.T < 0:
            raise ConfigError("N must be positive and T nonnegative")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        self.seeds = [int(s) for s in self.seeds]
        bad = set(self.functionals) - set(FUNCTIONALS)
        if bad or not self.functionals:
            raise ConfigError(f"unknown test functionals {sorted(bad)}; choose from {FUNCTIONALS}")
        if self.observable not in OBSERVABLES:
            raise ConfigError(f"unknown observable {self.observable!r}; choose from {OBSERVABLES}")
        if self.p < 1:
            raise ConfigError("p must be a positive integer")

    def require_slope_grid(self):
        if len(self.epsilons) < 3:
            raise ConfigError("slope regressions need at least 3 epsilons")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["probes"] = asdict(self.probes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "model" not in d:
            raise ConfigError("config needs a model")
        d["model"] = ModelSpec.from_dict(d["model"])
        probes = d.get("probes", {})
        bad = set(probes) - {"x", "mean", "y"}
        if bad:
            raise ConfigError(f"unknown probe fields {sorted(bad)}")
        d["probes"] = Probes(**probes)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)
