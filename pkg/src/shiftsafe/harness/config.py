"""Experiment configuration: nested dataclasses with JSON round-tripping."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

from ..diffusion import DiffusionConfig
from ..planner import PlannerConfig
from ..sim import SimConfig

SCHEMA_VERSION = 1
CASES = (0, 1, 2, 3)
ENVS = tuple(range(1, 11))


@dataclass(frozen=True)
class DataConfig:
    seen_envs: Tuple[int, ...] = (2, 4, 6, 8, 10)
    train_episodes: int = 200  # per seen env, diffusion training
    val_episodes: int = 100  # per seen env, held-out real scores and noise MSE
    base_sigma_episodes: int = 200  # training env, normalizer for the fixed-calibration case
    base_calib_episodes: int = 500  # training env, fixed calibration scores


@dataclass(frozen=True)
class CalibConfig:
    delta: float = 0.1
    K: int = 500
    eta_bin: float = 0.002
    n_nearest: int = 2
    rho_lp: float = 0.0
    l2_pairs: int = 256
    timing_K: int = 1000


@dataclass(frozen=True)
class RunConfig:
    envs: Tuple[int, ...] = ENVS
    cases: Tuple[int, ...] = (0, 2, 3)
    episodes: int = 200
    loop: str = "closed"
    save_traces: bool = False


@dataclass(frozen=True)
class SweepConfig:
    envs: Tuple[int, ...] = (1, 3, 5, 7, 9)
    eta_grid: Tuple[float, ...] = tuple(round(0.026 + 0.004 * k, 3) for k in range(10))
    t_fixed: int = 5
    tau_set: Tuple[int, ...] = (1, 5, 10)
    n: int = 400
    test_episodes: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    diffusion: DiffusionConfig = field(default_factory=lambda: DiffusionConfig(net_hidden=(32, 32), epochs=10, enc_epochs=5))
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:12]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _build(cls, d: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v, tp = d[f.name], hints[f.name]
        if dataclasses.is_dataclass(tp):
            v = _build(tp, v)
        elif (tp is tuple or typing.get_origin(tp) is tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[f.name] = v
    return cls(**kwargs)


def from_json(d: dict) -> ExperimentConfig:
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"config schema {version} is not supported (expected {SCHEMA_VERSION})")
    return _build(ExperimentConfig, d)


def load(path) -> ExperimentConfig:
    return from_json(json.loads(Path(path).read_text()))
