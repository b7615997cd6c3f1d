"""Experiment configuration: nested dataclasses, strict JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .costs import CostDistribution, TruncatedGaussianCosts, UniformCosts
from .flsim import TrainSettings, parse_mechanism
from .mechanism import OBJECTIVE_FORMS, ServerConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class CostSpec:
    kind: str = "uniform"
    lower: float = 0.0
    upper: float = 1.0
    mean: float = 0.5
    std: float = 0.2

    def build(self) -> CostDistribution:
        if self.kind == "uniform":
            return UniformCosts(lower=self.lower, upper=self.upper)
        if self.kind == "gaussian":
            return TruncatedGaussianCosts(mean=self.mean, std=self.std,
                                          lower=self.lower, upper=self.upper)
        raise ConfigError(f"costs.kind must be uniform or gaussian, got {self.kind!r}")


@dataclass
class TaskSpec:
    feature_dim: int = 16
    classes: int = 5
    samples_per_client: int = 60
    test_size: int = 400
    center_spread: float = 2.5
    noise: float = 1.0

    @property
    def weight_dim(self) -> int:
        return self.classes * (self.feature_dim + 1)


@dataclass
class ServerSpec:
    eta: float = 1.0
    q_coefficient: float | None = None  # None: derive from the noise model
    smoothness: float = 1.0
    grid_delta: float = 1e-3
    objective_form: str = "exact_l1"


@dataclass
class ExperimentConfig:
    clients: int = 100
    costs: CostSpec = field(default_factory=CostSpec)
    server: ServerSpec = field(default_factory=ServerSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    task: TaskSpec = field(default_factory=TaskSpec)
    mechanisms: list = field(default_factory=lambda: ["jsam"])
    seeds: list = field(default_factory=lambda: [0])
    eta_grid: list | None = None
    sensitivities: list | None = None
    payment_grid: int = 200
    out: str | None = None


_NESTED = {"costs": CostSpec, "server": ServerSpec, "train": TrainSettings,
           "task": TaskSpec}


def from_dict(data: dict) -> ExperimentConfig:
    """Strict construction: unknown keys are errors naming their path."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return _build(ExperimentConfig, data, path="")


def _build(cls, data, path):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown field {where!r}")
        if key in _NESTED and path == "" and not isinstance(data[key], dict):
            raise ConfigError(f"field {key!r} must be an object")
    kwargs = {}
    for key, value in data.items():
        if path == "" and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def load(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    cfg = from_dict(data)
    validate(cfg)
    return cfg


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def validate(cfg: ExperimentConfig) -> None:
    _require(isinstance(cfg.clients, int) and cfg.clients >= 1,
             "clients must be an integer >= 1")
    _require(cfg.costs.lower >= 0, "costs.lower must be >= 0")
    _require(cfg.costs.upper > cfg.costs.lower,
             "costs.upper must exceed costs.lower")
    if cfg.costs.kind == "gaussian":
        _require(cfg.costs.std > 0, "costs.std must be > 0")
    elif cfg.costs.kind != "uniform":
        raise ConfigError(f"costs.kind must be uniform or gaussian, got {cfg.costs.kind!r}")

    srv = cfg.server
    _require(srv.eta >= 0, "eta must be >= 0")
    _require(srv.q_coefficient is None or srv.q_coefficient > 0,
             "q_coefficient must be > 0 when given")
    _require(srv.smoothness > 0, "smoothness must be > 0")
    _require(0 < srv.grid_delta <= 1, "grid_delta must lie in (0, 1]")
    _require(srv.objective_form in OBJECTIVE_FORMS,
             f"objective_form must be one of {OBJECTIVE_FORMS}")

    tr = cfg.train
    _require(tr.rounds >= 1, "train.rounds must be >= 1")
    _require(tr.per_round >= 1, "train.per_round must be >= 1")
    _require(tr.clip > 0, "train.clip must be > 0")
    _require(tr.learning_rate > 0, "train.learning_rate must be > 0")
    _require(0 < tr.delta < 1, "train.delta must lie in (0, 1)")
    _require(tr.c2 > 0, "train.c2 must be > 0")
    _require(0 <= tr.similarity <= 100, "train.similarity must lie in [0, 100]")

    task = cfg.task
    _require(task.classes >= 2, "task.classes must be >= 2")
    _require(task.feature_dim >= 1, "task.feature_dim must be >= 1")
    _require(task.samples_per_client >= 1, "task.samples_per_client must be >= 1")
    _require(task.test_size >= 1, "task.test_size must be >= 1")

    _require(bool(cfg.mechanisms), "mechanisms must be nonempty")
    for name in cfg.mechanisms:
        try:
            parse_mechanism(name)
        except ValueError as exc:
            raise ConfigError(f"mechanisms: {exc}") from None

    _require(bool(cfg.seeds), "seeds must be nonempty")
    for s in cfg.seeds:
        _require(isinstance(s, int) and s >= 0, "seeds must be integers >= 0")

    if cfg.eta_grid is not None:
        _require(bool(cfg.eta_grid), "eta_grid must be nonempty when given")
        for e in cfg.eta_grid:
            _require(e > 0, "eta_grid entries must be > 0")

    if cfg.sensitivities is not None:
        _require(len(cfg.sensitivities) == cfg.clients,
                 "sensitivities must list one value per client")
        for c in cfg.sensitivities:
            _require(cfg.costs.lower <= c <= cfg.costs.upper,
                     "sensitivities must lie in the cost support")

    _require(cfg.payment_grid >= 2, "payment_grid must be >= 2")


def server_config(cfg: ExperimentConfig, eta: float | None = None) -> ServerConfig:
    """Materialize the solver config, deriving Q from the noise model if unset."""
    eta = cfg.server.eta if eta is None else eta
    if cfg.server.q_coefficient is not None:
        return ServerConfig(eta=eta, q_coefficient=cfg.server.q_coefficient,
                            grid_delta=cfg.server.grid_delta,
                            objective_form=cfg.server.objective_form)
    return ServerConfig.from_noise_model(
        eta=eta, c2=cfg.train.c2, delta=cfg.train.delta,
        dimension=cfg.task.weight_dim, iterations=cfg.train.rounds,
        smoothness=cfg.server.smoothness, grid_delta=cfg.server.grid_delta,
        objective_form=cfg.server.objective_form)
