"""Radar scan ingestion, extrinsic calibration, gating and voxel downsampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import EmptyStream, ParseError
from .geom import Pose


class RadarPoint(NamedTuple):
    pos: tuple[float, float, float]
    doppler: float
    power: float = math.nan


@dataclass(frozen=True)
class RadarScan:
    """One radar sweep stored column-wise.

    ``xyz`` is ``(N, 3)`` in meters, ``doppler`` is ``(N,)`` in m/s with
    positive meaning the target recedes, ``power`` is ``(N,)`` in dB (NaN when
    the sensor did not report it).
    """

    t_stamp: float
    xyz: np.ndarray
    doppler: np.ndarray
    power: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        xyz = np.array(self.xyz, dtype=float).reshape(-1, 3)
        dop = np.array(self.doppler, dtype=float).reshape(-1)
        pw = np.full(len(dop), np.nan) if self.power is None else np.array(self.power, dtype=float).reshape(-1)
        if not (len(xyz) == len(dop) == len(pw)):
            raise ValueError("xyz, doppler and power lengths differ")
        for name, arr in (("xyz", xyz), ("doppler", dop), ("power", pw)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_points(cls, t_stamp: float, points: Iterable[RadarPoint]) -> RadarScan:
        pts = list(points)
        return cls(
            t_stamp,
            np.array([p.pos for p in pts], dtype=float).reshape(-1, 3),
            [p.doppler for p in pts],
            [p.power for p in pts],
        )

    def __len__(self) -> int:
        return len(self.doppler)

    def __iter__(self) -> Iterator[RadarPoint]:
        for p, d, w in zip(self.xyz, self.doppler, self.power):
            yield RadarPoint((float(p[0]), float(p[1]), float(p[2])), float(d), float(w))

    @property
    def degenerate(self) -> bool:
        return len(self) == 0

    def subset(self, mask: np.ndarray) -> RadarScan:
        return RadarScan(self.t_stamp, self.xyz[mask], self.doppler[mask], self.power[mask])


@dataclass(frozen=True)
class Extrinsics:
    T_radar_to_base: Pose = field(default_factory=Pose)


@dataclass(frozen=True)
class PreprocessConfig:
    min_range: float = 0.5
    max_range: float = 120.0
    min_power: float = -math.inf
    voxel_leaf: float = 0.5


def _parse_line(line: str, lineno: int, path: str | None) -> RadarScan:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(lineno, f"invalid JSON ({exc.msg})", path) from None
    if not isinstance(rec, dict) or "t" not in rec or "points" not in rec:
        raise ParseError(lineno, "record needs 't' and 'points'", path)
    try:
        t = float(rec["t"])
    except (TypeError, ValueError):
        raise ParseError(lineno, "timestamp is not a number", path) from None
    if not math.isfinite(t):
        raise ParseError(lineno, "timestamp is not finite", path)
    raw = rec["points"]
    if not isinstance(raw, list):
        raise ParseError(lineno, "'points' must be a list", path)
    rows = np.full((len(raw), 5), np.nan)
    for i, entry in enumerate(raw):
        if not isinstance(entry, list) or len(entry) not in (4, 5):
            raise ParseError(lineno, f"point {i} must have 4 or 5 entries", path)
        try:
            rows[i, : len(entry)] = [float(v) for v in entry]
        except (TypeError, ValueError):
            raise ParseError(lineno, f"point {i} has a non-numeric entry", path) from None
    if not np.isfinite(rows[:, :3]).all():
        raise ParseError(lineno, "non-finite point position", path)
    if not np.isfinite(rows[:, 3]).all():
        raise ParseError(lineno, "non-finite doppler", path)
    keep = np.linalg.norm(rows[:, :3], axis=1) > 0.0
    rows = rows[keep]
    return RadarScan(t, rows[:, :3], rows[:, 3], rows[:, 4])


def iter_scan_stream(path: str | Path) -> Iterator[RadarScan]:
    """Stream scans from a radar JSONL file, validating as it goes."""
    spath = str(path)
    last_t = -math.inf
    n = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            scan = _parse_line(line, lineno, spath)
            if scan.t_stamp <= last_t:
                raise ParseError(lineno, "timestamps not monotonic", spath)
            last_t = scan.t_stamp
            n += 1
            yield scan
    if n == 0:
        raise EmptyStream(f"{spath}: no scans")


def parse_scan_stream(path: str | Path) -> list[RadarScan]:
    return list(iter_scan_stream(path))


def scan_to_json(scan: RadarScan) -> str:
    pts = []
    for p, d, w in zip(scan.xyz, scan.doppler, scan.power):
        row = [float(p[0]), float(p[1]), float(p[2]), float(d)]
        if not math.isnan(w):
            row.append(float(w))
        pts.append(row)
    return json.dumps({"t": float(scan.t_stamp), "points": pts})


def write_scan_stream(path: str | Path, scans: Iterable[RadarScan]) -> None:
    with open(path, "w") as fh:
        for s in scans:
            fh.write(scan_to_json(s) + "\n")


def apply_extrinsics(scan: RadarScan, ext: Extrinsics) -> RadarScan:
    """Express point positions in the base frame; Doppler is left untouched."""
    T = ext.T_radar_to_base
    return RadarScan(scan.t_stamp, T.transform_points(scan.xyz), scan.doppler, scan.power)


def range_power_filter(
    scan: RadarScan, min_range: float, max_range: float, min_power: float = -math.inf
) -> RadarScan:
    if not 0.0 <= min_range < max_range:
        raise ValueError("need 0 <= min_range < max_range")
    r = np.linalg.norm(scan.xyz, axis=1)
    keep = (r >= min_range) & (r <= max_range)
    with np.errstate(invalid="ignore"):
        keep &= np.isnan(scan.power) | (scan.power >= min_power)
    return scan.subset(keep)


def voxel_keys(cloud: np.ndarray, leaf: float) -> np.ndarray:
    return np.floor(np.asarray(cloud, dtype=float) / leaf).astype(np.int64)


def voxel_downsample(cloud: np.ndarray, leaf: float) -> np.ndarray:
    """Replace the points of each occupied voxel by their centroid.

    Output rows are ordered by voxel key, so the result is deterministic.
    """
    if leaf <= 0:
        raise ValueError("leaf must be positive")
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        return cloud.copy()
    _, inverse, counts = np.unique(voxel_keys(cloud, leaf), axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    out = np.zeros((len(counts), 3))
    for k in range(3):
        out[:, k] = np.bincount(inverse, weights=cloud[:, k], minlength=len(counts))
    return out / counts[:, None]


def preprocess_scan(scan: RadarScan, cfg: PreprocessConfig, ext: Extrinsics | None = None) -> RadarScan:
    """Range/power gating in the sensor frame, then extrinsics into the base frame."""
    gated = range_power_filter(scan, cfg.min_range, cfg.max_range, cfg.min_power)
    return apply_extrinsics(gated, ext) if ext is not None else gated
