"""Synthetic worlds, ground-vehicle trajectories, radar scans and IMU streams.

The simulator is the ground-truth oracle for the pipeline. Radar Doppler
follows the receding-positive convention: a static landmark seen by a
vehicle moving at ``v`` (body frame) along unit ray ``r`` reports
``-r . v``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import BadSpec
from .geom import ImuSample, Pose, Quat, euler_zyx_from_quat, qmatrix, quat_from_euler_zyx
from .preprocess import RadarScan, scan_to_json

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class TrajectorySpec:
    """Analytic ground-vehicle motion.

    ``segments`` is a sequence of ``(duration s, yaw rate rad/s)``; the yaw
    rate is blended between consecutive segments with a raised-cosine ramp
    of ``ramp`` seconds (area preserving) and is zero after the last segment.
    Terrain height is ``hill_amplitude * sin(2 pi x / hill_wavelength)``
    (flat when the amplitude is zero).
    """

    kind: str = "holonomic"
    speed: float = 1.0
    lateral_speed: float = 0.0
    yaw_rate: float = 0.0
    segments: tuple[tuple[float, float], ...] = ()
    ramp: float = 2.0
    duration: float = 10.0
    radar_hz: float = 10.0
    imu_hz: float = 100.0
    hill_amplitude: float = 0.0
    hill_wavelength: float = 50.0
    start_yaw: float = 0.0

    def validate(self) -> None:
        if not self.duration > 0:
            raise BadSpec("duration must be positive")
        if self.kind not in ("holonomic", "nonholonomic"):
            raise BadSpec(f"unknown trajectory kind {self.kind!r}")
        if self.radar_hz <= 0 or self.imu_hz <= 0:
            raise BadSpec("rates must be positive")
        ratio = self.imu_hz / self.radar_hz
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise BadSpec("imu_hz must be an integer multiple of radar_hz")
        if self.kind == "nonholonomic" and self.lateral_speed != 0.0:
            raise BadSpec("non-holonomic trajectories cannot move laterally")
        if self.hill_amplitude and self.hill_wavelength <= 0:
            raise BadSpec("hill_wavelength must be positive")
        if any(d <= 0 for d, _ in self.segments):
            raise BadSpec("segment durations must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    doppler_sigma: float = 0.0
    range_sigma: float = 0.0
    angular_sigma: float = 0.0
    imu_gyro_sigma: float = 0.0
    imu_attitude_sigma: float = 0.0
    imu_pitch_bias: float = 0.0
    z_doppler_bias: float = 0.0
    # constant body-frame gyro offset (rad/s); a model-independent heading drift source
    imu_gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("doppler_sigma", "range_sigma", "angular_sigma", "imu_gyro_sigma", "imu_attitude_sigma"):
            if getattr(self, name) < 0:
                raise BadSpec(f"{name} must be non-negative")


@dataclass(frozen=True)
class RadarSpec:
    fov_azimuth_deg: float = 120.0
    fov_elevation_deg: float = 30.0
    max_range: float = 100.0
    min_range: float = 0.5


@dataclass(frozen=True)
class WorldSpec:
    density: float = 0.04  # landmarks per square meter of corridor
    min_lateral: float = 3.0
    max_lateral: float = 40.0
    min_height: float = 0.3
    max_height: float = 5.0
    min_separation: float = 2.5
    n_dynamic: int = 0
    dynamic_speed: float = 3.0
    dynamic_points: int = 10
    seed: int = 0


@dataclass(frozen=True)
class DynamicObject:
    start: np.ndarray
    velocity: np.ndarray  # world frame, m/s
    offsets: np.ndarray  # (m, 3) cluster shape

    def points_at(self, t: float) -> np.ndarray:
        return self.start + self.velocity * t + self.offsets


@dataclass(frozen=True)
class World:
    landmarks: np.ndarray
    dynamic_objects: tuple[DynamicObject, ...] = ()


@dataclass(frozen=True, eq=False)
class SampledTrajectory:
    """Ground truth at IMU rate, stored column-wise. Indexing yields ``(t, Pose, body velocity)``."""

    t: np.ndarray
    pos: np.ndarray
    quat: np.ndarray  # (N, 4) w, x, y, z
    vel_body: np.ndarray
    omega_body: np.ndarray
    acc_world: np.ndarray
    spec: TrajectorySpec

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> tuple[float, Pose, np.ndarray]:
        return float(self.t[i]), self.pose(i), self.vel_body[i].copy()

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def pose(self, i: int) -> Pose:
        return Pose(float(self.t[i]), self.pos[i], Quat.from_array(self.quat[i]))

    def radar_indices(self) -> range:
        """Indices of radar scan instants in ``[0, duration)``."""
        step = int(round(self.spec.imu_hz / self.spec.radar_hz))
        return range(0, self._n_open(), step)

    def imu_indices(self) -> range:
        return range(0, self._n_open())

    def _n_open(self) -> int:
        return int(round(self.spec.duration * self.spec.imu_hz))

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.pos, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


def _yaw_rate_fn(spec: TrajectorySpec):
    if not spec.segments:
        return lambda t: spec.yaw_rate
    bounds = np.cumsum([0.0] + [d for d, _ in spec.segments])
    rates = [r for _, r in spec.segments] + [0.0]
    half = 0.5 * spec.ramp

    def rate(t: float) -> float:
        i = int(np.searchsorted(bounds, t, side="right")) - 1
        i = min(max(i, 0), len(rates) - 1)
        r = rates[i]
        # blend towards neighbours inside +-ramp/2 of a boundary
        for b_idx, lo, hi in ((i, rates[i - 1] if i > 0 else rates[0], rates[i]), (i + 1, rates[i], rates[min(i + 1, len(rates) - 1)])):
            if 0 < b_idx < len(bounds) and half > 0 and abs(t - bounds[b_idx]) < half:
                s = 0.5 - 0.5 * math.cos(math.pi * (t - bounds[b_idx] + half) / spec.ramp)
                return lo + (hi - lo) * s
        return r

    return rate


def terrain_height(spec: TrajectorySpec, xy: np.ndarray) -> np.ndarray:
    if not spec.hill_amplitude:
        return np.zeros(len(xy))
    return spec.hill_amplitude * np.sin(2 * math.pi / spec.hill_wavelength * xy[:, 0])


def _attitude(spec: TrajectorySpec, x, y, yaw) -> np.ndarray:
    """Rotation(s) with body z along the terrain normal and body x heading along ``yaw``.

    Accepts scalars or equal-length arrays; returns ``(3, 3)`` or ``(N, 3, 3)``.
    """
    x, y, yaw = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, yaw)))
    hx = hy = np.zeros_like(x)
    if spec.hill_amplitude:
        k = 2 * math.pi / spec.hill_wavelength
        hx = spec.hill_amplitude * k * np.cos(k * x)
    c, s = np.cos(yaw), np.sin(yaw)
    xb = np.stack([c, s, hx * c + hy * s], axis=-1)
    xb /= np.linalg.norm(xb, axis=-1, keepdims=True)
    zb = np.stack([-hx, -hy, np.ones_like(x)], axis=-1)
    zb /= np.linalg.norm(zb, axis=-1, keepdims=True)
    yb = np.cross(zb, xb)
    return np.stack([xb, yb, zb], axis=-1)


def _planar_velocity(spec: TrajectorySpec, x: float, yaw: float) -> tuple[float, float]:
    """Horizontal world velocity for the constant body velocity (scalar fast path)."""
    c, s = math.cos(yaw), math.sin(yaw)
    hx = 0.0
    if spec.hill_amplitude:
        k = 2 * math.pi / spec.hill_wavelength
        hx = spec.hill_amplitude * k * math.cos(k * x)
    xz = hx * c
    nx = math.sqrt(1.0 + xz * xz)
    xb = (c / nx, s / nx, xz / nx)
    nz = math.sqrt(1.0 + hx * hx)
    zb = (-hx / nz, 0.0, 1.0 / nz)
    yb = (zb[1] * xb[2] - zb[2] * xb[1], zb[2] * xb[0] - zb[0] * xb[2])
    return spec.speed * xb[0] + spec.lateral_speed * yb[0], spec.speed * xb[1] + spec.lateral_speed * yb[1]


def _batch_qfrom_matrix(R: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(R).as_quat()
    q = np.column_stack([xyzw[:, 3], xyzw[:, :3]])
    q[q[:, 0] < 0] *= -1
    return q


def sample_trajectory(spec: TrajectorySpec, substeps: int = 4) -> SampledTrajectory:
    spec.validate()
    rate = _yaw_rate_fn(spec)
    v_body = np.array([spec.speed, spec.lateral_speed, 0.0])
    n = int(round(spec.duration * spec.imu_hz)) + 1
    dt = 1.0 / spec.imu_hz

    def deriv(t: float, x: float, y: float, yaw: float) -> tuple[float, float, float]:
        vx, vy = _planar_velocity(spec, x, yaw)
        return vx, vy, rate(t)

    states = np.zeros((n, 3))
    x, y, yaw = 0.0, 0.0, spec.start_yaw
    states[0] = x, y, yaw
    h = dt / substeps
    for i in range(1, n):
        t = (i - 1) * dt
        for j in range(substeps):
            tj = t + j * h
            k1 = deriv(tj, x, y, yaw)
            k2 = deriv(tj + h / 2, x + h / 2 * k1[0], y + h / 2 * k1[1], yaw + h / 2 * k1[2])
            k3 = deriv(tj + h / 2, x + h / 2 * k2[0], y + h / 2 * k2[1], yaw + h / 2 * k2[2])
            k4 = deriv(tj + h, x + h * k3[0], y + h * k3[1], yaw + h * k3[2])
            x += h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            y += h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            yaw += h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        states[i] = x, y, yaw

    t_arr = np.arange(n) * dt
    R = _attitude(spec, states[:, 0], states[:, 1], states[:, 2])
    pos = np.column_stack([states[:, :2], terrain_height(spec, states[:, :2])])
    quat = _batch_qfrom_matrix(R)
    vel_w = R @ v_body
    # body rates from a central difference along the state derivative
    d = np.column_stack([vel_w[:, :2], [rate(t) for t in t_arr]])
    eps = 1e-4
    Rp = _attitude(spec, *(states + eps * d).T)
    Rm = _attitude(spec, *(states - eps * d).T)
    omega = Rotation.from_matrix(np.einsum("nji,njk->nik", Rm, Rp)).as_rotvec() / (2 * eps)
    acc = np.gradient(vel_w, dt, axis=0) if n > 2 else np.zeros_like(vel_w)
    vel_body = np.tile(v_body, (n, 1))
    return SampledTrajectory(t_arr, pos, quat, vel_body, omega, acc, spec)


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


def generate_world(traj: SampledTrajectory, spec: WorldSpec = WorldSpec()) -> World:
    """Static landmarks scattered in a corridor around the path, with a minimum separation."""
    rng = np.random.default_rng(spec.seed)
    path = traj.pos[:: max(1, len(traj.pos) // 2000)]
    lo = path[:, :2].min(axis=0) - spec.max_lateral
    hi = path[:, :2].max(axis=0) + spec.max_lateral
    area = float(np.prod(hi - lo))
    cand = rng.uniform(lo, hi, size=(int(area * spec.density * 2) + 1, 2))
    d, _ = cKDTree(path[:, :2]).query(cand)
    cand = cand[(d >= spec.min_lateral) & (d <= spec.max_lateral)]
    # thin to the requested density over the corridor
    target = int(spec.density * area)
    cand = cand[:target] if len(cand) > target else cand
    kept = _min_separation(cand, spec.min_separation)
    heights = rng.uniform(spec.min_height, spec.max_height, size=len(kept))
    z = terrain_height(traj.spec, kept) + heights
    landmarks = np.column_stack([kept, z])

    dyn = []
    for _ in range(spec.n_dynamic):
        i = int(rng.integers(len(traj.pos)))
        base = traj.pos[i] + np.append(rng.uniform(-20, 20, 2), 1.0)
        heading = rng.uniform(-math.pi, math.pi)
        vel = spec.dynamic_speed * np.array([math.cos(heading), math.sin(heading), 0.0])
        offsets = rng.normal(scale=0.5, size=(spec.dynamic_points, 3))
        dyn.append(DynamicObject(base - vel * traj.t[i], vel, offsets))
    return World(landmarks, tuple(dyn))


def _min_separation(pts: np.ndarray, sep: float) -> np.ndarray:
    if sep <= 0 or len(pts) == 0:
        return pts
    grid: dict[tuple[int, int], list[int]] = {}
    kept: list[int] = []
    for i, p in enumerate(pts):
        cx, cy = int(math.floor(p[0] / sep)), int(math.floor(p[1] / sep))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for j in grid.get((cx + dx, cy + dy), ()):
                    if (pts[j, 0] - p[0]) ** 2 + (pts[j, 1] - p[1]) ** 2 < sep * sep:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            grid.setdefault((cx, cy), []).append(i)
            kept.append(i)
    return pts[kept]


# ---------------------------------------------------------------------------
# sensors
# ---------------------------------------------------------------------------


def render_scan(
    world: World,
    pose: Pose,
    body_vel: np.ndarray,
    noise: NoiseSpec = NoiseSpec(),
    rng: np.random.Generator | None = None,
    radar: RadarSpec = RadarSpec(),
) -> RadarScan:
    """Radar returns of every landmark (and dynamic object) inside the field of view."""
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    R = pose.rot.matrix()
    v_body = np.asarray(body_vel, dtype=float)
    groups = [(world.landmarks, np.zeros(3))]
    for obj in world.dynamic_objects:
        groups.append((obj.points_at(pose.t_stamp), obj.velocity))
    xyz_all, dop_all = [], []
    for pts, v_obj in groups:
        if len(pts) == 0:
            continue
        p = (pts - pose.trans) @ R  # world -> body
        rng_ = np.linalg.norm(p, axis=1)
        az = np.arctan2(p[:, 1], p[:, 0])
        el = np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
        keep = (
            (rng_ <= radar.max_range)
            & (rng_ >= radar.min_range)
            & (np.abs(az) <= math.radians(radar.fov_azimuth_deg) / 2)
            & (np.abs(el) <= math.radians(radar.fov_elevation_deg) / 2)
        )
        p, rng_, az, el = p[keep], rng_[keep], az[keep], el[keep]
        rhat = p / rng_[:, None]
        v_rel = v_body - R.T @ v_obj
        xyz_all.append((rng_, az, el))
        dop_all.append(-(rhat @ v_rel))
    if not xyz_all:
        return RadarScan(pose.t_stamp, np.zeros((0, 3)), np.zeros(0))
    r = np.concatenate([a[0] for a in xyz_all])
    az = np.concatenate([a[1] for a in xyz_all])
    el = np.concatenate([a[2] for a in xyz_all])
    dop = np.concatenate(dop_all)
    n = len(r)
    rz_true = np.sin(el)
    if noise.range_sigma:
        r = r + rng.normal(scale=noise.range_sigma, size=n)
    if noise.angular_sigma:
        az = az + rng.normal(scale=noise.angular_sigma, size=n)
        el = el + rng.normal(scale=noise.angular_sigma, size=n)
    if noise.doppler_sigma:
        dop = dop + rng.normal(scale=noise.doppler_sigma, size=n)
    dop = dop + noise.z_doppler_bias * np.abs(rz_true)
    xyz = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])
    power = 30.0 - 0.2 * r
    if n < 50:
        log.debug("scan at t=%.2f has only %d returns", pose.t_stamp, n)
    return RadarScan(pose.t_stamp, xyz, dop, power)


def render_imu(traj: SampledTrajectory, noise: NoiseSpec = NoiseSpec(), rng: np.random.Generator | None = None) -> list[ImuSample]:
    return list(iter_render_imu(traj, noise, rng))


def iter_render_imu(
    traj: SampledTrajectory, noise: NoiseSpec = NoiseSpec(), rng: np.random.Generator | None = None
) -> Iterator[ImuSample]:
    """Fused attitude (pitch/roll noise and optional pitch bias) plus noisy gyro rates."""
    rng = rng if rng is not None else np.random.default_rng(noise.seed + 1)
    for i in traj.imu_indices():
        q = Quat.from_array(traj.quat[i])
        if noise.imu_attitude_sigma or noise.imu_pitch_bias:
            e = euler_zyx_from_quat(q)
            dp, dr = rng.normal(scale=noise.imu_attitude_sigma, size=2) if noise.imu_attitude_sigma else (0.0, 0.0)
            q = quat_from_euler_zyx((e.yaw, e.pitch + noise.imu_pitch_bias + dp, e.roll + dr))
        w = traj.omega_body[i]
        if noise.imu_gyro_sigma:
            w = w + rng.normal(scale=noise.imu_gyro_sigma, size=3)
        w = w + np.asarray(noise.imu_gyro_bias, dtype=float)
        R = qmatrix(traj.quat[i])
        acc = R.T @ (traj.acc_world[i] - GRAVITY)
        yield ImuSample(float(traj.t[i]), q, w, acc)


def iter_render_scans(
    world: World,
    traj: SampledTrajectory,
    noise: NoiseSpec = NoiseSpec(),
    rng: np.random.Generator | None = None,
    radar: RadarSpec = RadarSpec(),
) -> Iterator[RadarScan]:
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    for i in traj.radar_indices():
        yield render_scan(world, traj.pose(i), traj.vel_body[i], noise, rng, radar)


@dataclass(frozen=True)
class SimConfig:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    radar: RadarSpec = field(default_factory=RadarSpec)


def write_dataset(cfg: SimConfig, out_dir: str | Path) -> dict[str, Path]:
    """Render and stream ``radar.jsonl``, ``imu.csv`` and ``groundtruth.tum`` into ``out_dir``."""
    from .evaluation import write_tum
    from .geom import write_imu_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = sample_trajectory(cfg.trajectory)
    world = generate_world(traj, cfg.world)
    paths = {"radar": out / "radar.jsonl", "imu": out / "imu.csv", "groundtruth": out / "groundtruth.tum"}
    rng_radar = np.random.default_rng([cfg.noise.seed, 0])
    rng_imu = np.random.default_rng([cfg.noise.seed, 1])
    with open(paths["radar"], "w") as fh:
        for scan in iter_render_scans(world, traj, cfg.noise, rng_radar, cfg.radar):
            fh.write(scan_to_json(scan) + "\n")
    write_imu_csv(paths["imu"], iter_render_imu(traj, cfg.noise, rng_imu))
    write_tum(paths["groundtruth"], (traj.pose(i) for i in range(len(traj))))
    return paths
