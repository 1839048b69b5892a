"""Pipeline configuration: one dataclass per section, loaded from TOML with strict key checking."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .ego_velocity import ModelKind, RansacConfig
from .errors import ConfigError
from .geom import Pose, Quat
from .gicp import GicpConfig
from .pose_graph.window import OdomConfig
from .preprocess import Extrinsics, PreprocessConfig
from .simulator import NoiseSpec, RadarSpec, SimConfig, TrajectorySpec, WorldSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class EvalConfig:
    max_dt: float = 0.05
    subtraj_lengths: tuple[float, ...] = (5.0, 10.0, 15.0, 20.0, 25.0)
    align: bool = True


@dataclass(frozen=True)
class ExtrinsicsConfig:
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # w, x, y, z
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def to_extrinsics(self) -> Extrinsics:
        return Extrinsics(Pose(0.0, np.array(self.translation), Quat(*self.rotation)))


@dataclass(frozen=True)
class RunConfig:
    model: str = "holonomic"
    queue_size: int = 16
    threaded: bool = True
    gicp_workers: int = 4
    radar_file: str = "radar.jsonl"
    imu_file: str = "imu.csv"
    groundtruth_file: str = "groundtruth.tum"

    def __post_init__(self) -> None:
        try:
            ModelKind(self.model)
        except ValueError:
            raise ConfigError(f"run.model: unknown model {self.model!r}") from None
        if self.queue_size < 1:
            raise ConfigError("run.queue_size must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    gicp: GicpConfig = field(default_factory=GicpConfig)
    odom: OdomConfig = field(default_factory=OdomConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    extrinsics: ExtrinsicsConfig = field(default_factory=ExtrinsicsConfig)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    radar: RadarSpec = field(default_factory=RadarSpec)

    def sim_config(self) -> SimConfig:
        return SimConfig(self.trajectory, self.noise, self.world, self.radar)

    def with_overrides(self, **sections: dict[str, Any]) -> PipelineConfig:
        """Return a copy with ``section={key: value}`` overrides applied and validated."""
        return _apply(self, sections)


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected a boolean")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _apply(base: PipelineConfig, sections: dict[str, dict[str, Any]]) -> PipelineConfig:
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    updates = {}
    for sec, values in sections.items():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{sec}] must be a table")
        current = getattr(base, sec)
        fields = {f.name for f in dataclasses.fields(current)}
        kw = {}
        for key, value in values.items():
            if key not in fields:
                raise ConfigError(f"unknown key {sec}.{key}")
            kw[key] = _coerce(value, getattr(current, key), f"{sec}.{key}")
        try:
            updates[sec] = dataclasses.replace(current, **kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec}]: {exc}") from None
    return dataclasses.replace(base, **updates)


def load_config(path: str | Path | None = None, base: PipelineConfig | None = None) -> PipelineConfig:
    """Read a TOML file of ``[section]`` tables over the defaults; unknown keys raise :class:`ConfigError`."""
    cfg = base or PipelineConfig()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return _apply(cfg, data)
