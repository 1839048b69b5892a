"""Doppler ego-velocity estimation with ground-vehicle motion constraints.

Every model is linear in its unknowns: the 3-vector ``v`` seen by the rays is
``M @ x`` with

* unconstrained: ``M = I`` and ``x = (v_x, v_y, v_z)``;
* holonomic: ``M = [[cos(pitch), 0], [0, cos(roll)], [sin(pitch), sin(roll)]]``
  and ``x = (V_x, V_y)``;
* non-holonomic: ``M = d(pitch, yaw)`` (a unit direction) and ``x = V``.

The solvers work directly on the ``A v = doppler`` system. Under the
receding-positive Doppler convention the static world appears to move at
``-v_vehicle``, so :func:`estimate_vehicle_velocity` negates the solution.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateDirection, DegenerateScan, NoConsensus, RankDeficient
from .geom import Quat, euler_zyx_from_quat
from .preprocess import RadarScan


class ModelKind(str, enum.Enum):
    UNCONSTRAINED = "unconstrained"
    HOLONOMIC = "holonomic"
    NONHOLONOMIC = "nonholonomic"


MIN_SAMPLE = {ModelKind.UNCONSTRAINED: 3, ModelKind.HOLONOMIC: 2, ModelKind.NONHOLONOMIC: 1}


@dataclass(frozen=True)
class MotionModel:
    kind: ModelKind = ModelKind.UNCONSTRAINED
    pitch_inc: float = 0.0
    roll_inc: float = 0.0
    yaw_inc: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind(self.kind))
        for a in (self.pitch_inc, self.roll_inc, self.yaw_inc):
            if not math.isfinite(a):
                raise ValueError("motion model angles must be finite")
        if abs(self.pitch_inc) >= math.pi / 2 or abs(self.roll_inc) >= math.pi / 2:
            raise ValueError("|pitch|, |roll| must be below pi/2")

    @classmethod
    def from_orientations(cls, kind: ModelKind | str, q_prev: Quat, q_curr: Quat) -> MotionModel:
        """Angles are the Z-Y-X components of the attitude change ``q_prev^-1 * q_curr``."""
        e = euler_zyx_from_quat(q_prev.inverse() * q_curr)
        return cls(ModelKind(kind), pitch_inc=e.pitch, roll_inc=e.roll, yaw_inc=e.yaw)

    def basis(self) -> np.ndarray:
        """Matrix ``M`` (3 x unknowns) mapping model parameters to the velocity vector."""
        if self.kind is ModelKind.UNCONSTRAINED:
            return np.eye(3)
        if self.kind is ModelKind.HOLONOMIC:
            th, ph = self.pitch_inc, self.roll_inc
            return np.array([[math.cos(th), 0.0], [0.0, math.cos(ph)], [math.sin(th), math.sin(ph)]])
        return nonholonomic_direction(self.pitch_inc, self.yaw_inc)[:, None]


@dataclass(frozen=True)
class EgoVelocity:
    v: np.ndarray
    inlier_count: int
    inlier_ratio: float
    residual_rms: float
    params: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.array(self.v, dtype=float).reshape(3)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    threshold: float = 0.2
    min_inlier_ratio: float = 0.3
    seed: int = 0
    enabled: bool = True
    refine_passes: int = 5


def nonholonomic_direction(pitch: float, yaw: float) -> np.ndarray:
    c = math.sin(math.pi / 2 - pitch)
    return np.array([c * math.cos(yaw), c * math.sin(yaw), math.sin(pitch)])


def doppler_rows(scan: RadarScan) -> tuple[np.ndarray, np.ndarray]:
    """Unit line-of-sight rows and the Doppler right-hand side."""
    if len(scan) < 1:
        raise DegenerateScan("scan has no points")
    r = np.linalg.norm(scan.xyz, axis=1)
    if np.any(r <= 0.0):
        raise DegenerateScan("zero-range point")
    return scan.xyz / r[:, None], np.array(scan.doppler, dtype=float)


def _normal_lstsq(B: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cholesky on the normal equations, SVD least squares if ill-conditioned."""
    N = B.T @ B
    if np.linalg.cond(N) < 1e10:
        try:
            return cho_solve(cho_factor(N), B.T @ y)
        except np.linalg.LinAlgError:
            pass
    return np.linalg.lstsq(B, y, rcond=None)[0]


def solve_unconstrained(rows: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=float).reshape(-1, 3)
    if len(rows) < 3 or np.linalg.svd(rows, compute_uv=False)[-1] <= 1e-6:
        raise RankDeficient("ray directions do not span 3-D")
    return _normal_lstsq(rows, np.asarray(rhs, dtype=float))


def _solve_holonomic_params(rows: np.ndarray, rhs: np.ndarray, model: MotionModel) -> np.ndarray:
    B = rows @ model.basis()
    if len(B) < 2:
        raise RankDeficient("holonomic model needs at least 2 rays")
    s = np.linalg.svd(B, compute_uv=False)
    if s[-1] == 0.0 or s[0] / s[-1] > 1e8:
        raise RankDeficient("reduced holonomic design matrix is ill-conditioned")
    return _normal_lstsq(B, rhs)


def solve_holonomic(rows: np.ndarray, rhs: np.ndarray, pitch_inc: float, roll_inc: float) -> EgoVelocity:
    rows = np.asarray(rows, dtype=float).reshape(-1, 3)
    rhs = np.asarray(rhs, dtype=float)
    model = MotionModel(ModelKind.HOLONOMIC, pitch_inc=pitch_inc, roll_inc=roll_inc)
    x = _solve_holonomic_params(rows, rhs, model)
    return _finish(rows, rhs, model.basis() @ x, x, np.ones(len(rhs), dtype=bool))


def _solve_nonholonomic_params(rows: np.ndarray, rhs: np.ndarray, model: MotionModel) -> np.ndarray:
    a = rows @ model.basis()[:, 0]
    aa = float(a @ a)
    if math.sqrt(aa) < 1e-9:
        raise DegenerateDirection("all rays orthogonal to the motion direction")
    return np.array([float(a @ rhs) / aa])


def solve_nonholonomic(rows: np.ndarray, rhs: np.ndarray, pitch_inc: float, yaw_inc: float) -> EgoVelocity:
    rows = np.asarray(rows, dtype=float).reshape(-1, 3)
    rhs = np.asarray(rhs, dtype=float)
    model = MotionModel(ModelKind.NONHOLONOMIC, pitch_inc=pitch_inc, yaw_inc=yaw_inc)
    x = _solve_nonholonomic_params(rows, rhs, model)
    return _finish(rows, rhs, model.basis() @ x, x, np.ones(len(rhs), dtype=bool))


def solve_model(rows: np.ndarray, rhs: np.ndarray, model: MotionModel) -> np.ndarray:
    """Model parameters ``x`` (the velocity is ``model.basis() @ x``)."""
    if model.kind is ModelKind.UNCONSTRAINED:
        return solve_unconstrained(rows, rhs)
    if model.kind is ModelKind.HOLONOMIC:
        return _solve_holonomic_params(rows, rhs, model)
    return _solve_nonholonomic_params(rows, rhs, model)


def _finish(rows, rhs, v, params, mask) -> EgoVelocity:
    res = rows[mask] @ v - rhs[mask]
    n = int(mask.sum())
    rms = float(math.sqrt(np.mean(res**2))) if n else 0.0
    return EgoVelocity(v, n, n / len(rhs) if len(rhs) else 0.0, rms, np.asarray(params, dtype=float))


def _minimal_solutions(B: np.ndarray, rhs: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve every minimal sample at once; returns (params, valid mask)."""
    Bs = B[idx]  # (iters, k, m)
    ys = rhs[idx]  # (iters, k)
    m = B.shape[1]
    if m == 1:
        bb = np.einsum("ik,ik->i", Bs[:, :, 0], Bs[:, :, 0])
        valid = np.sqrt(bb) > 1e-9
        x = np.where(valid, np.einsum("ik,ik->i", Bs[:, :, 0], ys) / np.where(valid, bb, 1.0), 0.0)
        return x[:, None], valid
    det = np.linalg.det(Bs)
    valid = np.abs(det) > 1e-9
    Bsafe = np.where(valid[:, None, None], Bs, np.eye(m))
    x = np.linalg.solve(Bsafe, ys[..., None])[..., 0]
    return np.where(valid[:, None], x, 0.0), valid


def ransac_estimate(
    scan_or_rows: RadarScan | tuple[np.ndarray, np.ndarray],
    model: MotionModel,
    cfg: RansacConfig = RansacConfig(),
) -> tuple[EgoVelocity, np.ndarray]:
    """Robust fit of ``A v = doppler`` under ``model``; returns the estimate and inlier mask.

    Hypotheses come from minimal samples (3, 2 or 1 rays by model). The best
    consensus set is refit by least squares, then re-scored and refit up to
    ``cfg.refine_passes`` times.
    """
    if isinstance(scan_or_rows, RadarScan):
        rows, rhs = doppler_rows(scan_or_rows)
    else:
        rows, rhs = (np.asarray(a, dtype=float) for a in scan_or_rows)
    n = len(rhs)
    k = MIN_SAMPLE[model.kind]
    if n < k:
        raise DegenerateScan(f"{n} points, model needs at least {k}")
    M = model.basis()

    if not cfg.enabled:
        x = solve_model(rows, rhs, model)
        return _finish(rows, rhs, M @ x, x, np.ones(n, dtype=bool)), np.ones(n, dtype=bool)

    rng = np.random.default_rng(cfg.seed)
    B = rows @ M
    idx = rng.random((cfg.iterations, n)).argsort(axis=1)[:, :k]
    params, valid = _minimal_solutions(B, rhs, idx)
    inl = np.abs(params @ B.T - rhs) < cfg.threshold
    counts = np.where(valid, inl.sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < max(k, 1) or counts[best] / n < cfg.min_inlier_ratio:
        raise NoConsensus(f"best consensus {max(counts[best], 0)}/{n} below ratio {cfg.min_inlier_ratio}")
    mask = inl[best]
    x = solve_model(rows[mask], rhs[mask], model)
    # refit on the re-scored inliers until the set settles, so the answer does not hinge on the winning sample
    for _ in range(cfg.refine_passes):
        new = np.abs(rows @ (M @ x) - rhs) < cfg.threshold
        if new.sum() < k or np.array_equal(new, mask):
            break
        mask = new
        x = solve_model(rows[mask], rhs[mask], model)
    return _finish(rows, rhs, M @ x, x, mask), mask


def estimate_vehicle_velocity(
    scan: RadarScan,
    model: MotionModel,
    cfg: RansacConfig = RansacConfig(),
    sensor_to_base: np.ndarray | None = None,
) -> tuple[EgoVelocity, np.ndarray]:
    """Vehicle body-frame velocity from a sensor-frame scan.

    Line-of-sight rays must originate at the radar, so rows are built from the
    sensor-frame scan and rotated into the base frame by ``sensor_to_base``
    (3x3). The lever-arm contribution is ignored.
    """
    rows, rhs = doppler_rows(scan)
    if sensor_to_base is not None:
        rows = rows @ np.asarray(sensor_to_base).T
    est, mask = ransac_estimate((rows, rhs), model, cfg)
    return replace(est, v=-est.v, params=-est.params if est.params is not None else None), mask
