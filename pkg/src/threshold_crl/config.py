"""Experiment configuration: YAML file, environment overrides, stable hashing."""
from __future__ import annotations

import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import stable_hash
from .env import EnvConfig
from .mdp import ClientModel, ModelError, validate_model
from .npg import TrainConfig
from .solve import point_rho, uniform_rho

ENV_OUT = "THRESHOLD_CRL_OUT"
ENV_SEED = "THRESHOLD_CRL_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    lambda_points: int = 21
    lambda_max: float | None = None  # None: 2N / ((1 - gamma) xi)
    dual_step: float = 1e-3


@dataclass(frozen=True)
class ReportSettings:
    episodes: int = 100
    write_trace: bool = True
    bound_horizons: tuple = (100, 400, 1600)
    gradient_samples: int = 100
    identity_samples: int = 1000
    checkpoint_every: int = 0
    tolerances: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    clients: tuple
    K: float
    rho: str = "origin"
    seed: int = 0
    output_dir: str = "out"
    slots: int | None = None  # HIGH slots in the simulator; defaults to floor(K)
    env_mode: str = "hard"
    horizon: int = 200
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    report: ReportSettings = field(default_factory=ReportSettings)

    @property
    def N(self) -> int:
        return len(self.clients)

    @property
    def gamma(self) -> float:
        return self.clients[0].gamma

    @property
    def K_bar(self) -> float:
        return self.K / (1.0 - self.gamma)

    def rhos(self) -> list[np.ndarray]:
        make = {"origin": point_rho, "uniform": uniform_rho}[self.rho]
        return [make(m) for m in self.clients]

    def pairs(self) -> list[tuple[ClientModel, np.ndarray]]:
        return list(zip(self.clients, self.rhos()))

    def env(self, mode: str | None = None) -> EnvConfig:
        slots = int(self.K) if self.slots is None else self.slots
        return EnvConfig(list(self.clients), slots, mode or self.env_mode, self.horizon,
                         self.rhos(), self.seed)

    def train_config(self) -> TrainConfig:
        """Training settings with the derived budget and a seed drawn from the top-level seed."""
        seed = int(np.random.SeedSequence([self.seed, zlib.crc32(b"train")]).generate_state(1)[0])
        return replace(self.train, K_bar=self.K_bar, seed=seed)

    def to_dict(self) -> dict:
        d = {
            "name": self.name, "seed": self.seed, "output_dir": self.output_dir,
            "K": self.K, "rho": self.rho, "slots": self.slots, "env_mode": self.env_mode,
            "horizon": self.horizon,
            "clients": [m.to_dict() for m in self.clients],
            "train": {k: v for k, v in asdict(self.train).items() if k not in ("K_bar", "seed")},
            "solver": asdict(self.solver),
            "report": {**asdict(self.report), "bound_horizons": list(self.report.bound_horizons)},
        }
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return stable_hash(d)

    def train_hash(self) -> str:
        """Hash of everything the training trajectory depends on."""
        d = self.to_dict()
        return stable_hash({k: d[k] for k in ("seed", "K", "rho", "clients", "train")})


def _build(cls, data: dict | None, what: str):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} settings: {exc}") from exc


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    raw = d.pop("clients", None)
    if raw is None:
        raise ConfigError("config needs a 'clients' entry")
    if isinstance(raw, dict) and "model" in raw:
        extra = set(raw) - {"model", "count"}
        if extra:
            raise ConfigError(f"unknown clients keys: {sorted(extra)}")
        raw = [raw["model"]] * int(raw.get("count", 1))
    try:
        clients = tuple(ClientModel.from_dict(c) for c in raw)
    except (KeyError, ModelError, TypeError) as exc:
        raise ConfigError(f"bad client model: {exc}") from exc
    for n, m in enumerate(clients):
        problems = validate_model(m)
        if problems:
            raise ConfigError(f"client {n}: {'; '.join(problems)}")
    if len({m.gamma for m in clients}) != 1:
        raise ConfigError("all clients must share gamma")
    tr = dict(d.pop("train", None) or {})
    derived = {"K_bar", "seed"} & set(tr)
    if derived:
        raise ConfigError(f"train keys {sorted(derived)} are derived from K and seed")
    train = _build(TrainConfig, tr, "train")
    solver = _build(SolverSettings, d.pop("solver", None), "solver")
    rep = dict(d.pop("report", None) or {})
    if "bound_horizons" in rep:
        rep["bound_horizons"] = tuple(int(t) for t in rep["bound_horizons"])
    report = _build(ReportSettings, rep, "report")
    if "K" not in d:
        raise ConfigError("config needs a relaxed budget 'K'")
    cfg = _build(ExperimentConfig, {**d, "clients": clients, "train": train,
                                    "solver": solver, "report": report}, "top-level")
    if cfg.rho not in ("origin", "uniform"):
        raise ConfigError("rho must be 'origin' or 'uniform'")
    if not 0 < cfg.K_bar:
        raise ConfigError("K must be positive")
    return cfg


def load(path: str | os.PathLike) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return from_dict(data)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def apply_overrides(cfg: ExperimentConfig, out: str | None = None, seed: int | None = None,
                    environ=os.environ) -> ExperimentConfig:
    """Precedence: explicit argument, then environment variable, then file value."""
    if out is None:
        out = environ.get(ENV_OUT)
    if seed is None and environ.get(ENV_SEED) is not None:
        try:
            seed = int(environ[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer") from exc
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    return cfg
