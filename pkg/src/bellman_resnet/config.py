"""Experiment configuration files (TOML).

Unknown keys are errors that name the offending key, so a typo never
silently falls back to a default.  Example::

    seed = 0

    [spec]
    problem = "appendix_e"
    params = { gamma = 0.9 }

    [grid]
    state_nodes = 11

    [stack]
    epsilon = 0.1
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .mdp_model import MdpSpec, make_spec
from .operator_net import TrainConfig
from .trajectory import SimConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SpecSection:
    problem: str = "appendix_e"
    params: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridSection:
    state_nodes: object = 11
    time_nodes: Optional[int] = None
    action_nodes: object = 5


@dataclass(frozen=True)
class SimSection:
    substeps_per_delta: int = 16
    n_samples: int = 1000
    antithetic: bool = True


@dataclass(frozen=True)
class ValueIterationSection:
    k_max: int = 2
    tol: float = 1e-12
    lipschitz_pairs: int = 200


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 2500
    learn_rate: float = 1e-3
    batch_size: int = 256
    train_count: int = 4096
    test_count: int = 64
    hard_examples: int = 1024
    optimizer: str = "adam"
    momentum: float = 0.9
    hidden: Optional[list] = None
    activation: str = "relu"
    skip: bool = True
    tube: float = 0.05
    n_anchors: int = 45
    target_eps: Optional[float] = None


@dataclass(frozen=True)
class StackSection:
    epsilon: float = 0.1
    oracle_blocks: bool = False
    shared_block: bool = True
    block_file: Optional[str] = None
    injected_error: Optional[float] = None


@dataclass(frozen=True)
class ContractionSection:
    n_pairs: int = 50
    tol: Optional[float] = None


@dataclass(frozen=True)
class AuditSection:
    n_probe: int = 10_000


_SECTIONS = {
    "spec": SpecSection,
    "grid": GridSection,
    "sim": SimSection,
    "value_iteration": ValueIterationSection,
    "training": TrainingSection,
    "stack": StackSection,
    "contraction": ContractionSection,
    "audit": AuditSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: Optional[str] = None
    spec: SpecSection = SpecSection()
    grid: GridSection = GridSection()
    sim: SimSection = SimSection()
    value_iteration: ValueIterationSection = ValueIterationSection()
    training: TrainingSection = TrainingSection()
    stack: StackSection = StackSection()
    contraction: ContractionSection = ContractionSection()
    audit: AuditSection = AuditSection()

    def build_spec(self) -> MdpSpec:
        return make_spec(self.spec.problem, self.spec.params, self.spec.constants)

    def sim_config(self) -> SimConfig:
        return SimConfig(self.sim.substeps_per_delta, self.sim.n_samples, self.seed,
                         self.sim.antithetic)

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(epochs=t.epochs, learn_rate=t.learn_rate, batch_size=t.batch_size,
                           train_count=t.train_count, test_count=t.test_count,
                           hard_examples=t.hard_examples, optimizer=t.optimizer,
                           momentum=t.momentum,
                           hidden=tuple(t.hidden) if t.hidden is not None else None,
                           activation=t.activation, skip=t.skip, seed=self.seed,
                           target_eps=t.target_eps)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _section(cls, name: str, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'")
    try:
        return cls(**data)
    except TypeError as exc:  # pragma: no cover - guarded by the key check
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(data: dict) -> ExperimentConfig:
    kw = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kw[key] = _section(_SECTIONS[key], key, value)
        elif key == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError("key 'seed' must be a non-negative integer")
            kw[key] = value
        elif key == "out_dir":
            kw[key] = str(value)
        else:
            raise ConfigError(f"unknown key '{key}'")
    cfg = ExperimentConfig(**kw)
    try:
        cfg.build_spec()
    except ValueError as exc:
        raise ConfigError(f"[spec]: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return parse_config(data)
