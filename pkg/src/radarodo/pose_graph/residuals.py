"""Pose-graph residuals and their analytic Jacobians.

Every pose is perturbed as ``t <- t + dt`` (world frame) and
``q <- q * exp(dtheta)`` (body frame); Jacobians are taken with respect to
``[dt, dtheta]`` (6 columns). Quaternion residuals are 4-component
differences against the identity after hemisphere canonicalization, so the
Jacobian carries the sign of that canonicalization.
"""

from __future__ import annotations

import math

import numpy as np

from ..geom import Pose, Quat, euler_zyx_from_quat, qcanon, qconj, qleft, qmatrix, qmul, qright, skew

Q_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])
# d(q * exp(dtheta)) / d dtheta at zero, for q = identity
_HALF = np.vstack([np.zeros(3), 0.5 * np.eye(3)])


def _canon_sign(p: np.ndarray) -> float:
    return -1.0 if p[0] < 0.0 else 1.0


def _arr(q: Quat | np.ndarray) -> np.ndarray:
    return q.array() if isinstance(q, Quat) else np.asarray(q, dtype=float)


def relative_translation_jac(t_a, q_a, t_b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``u = R(q_a)^T (t_b - t_a)`` with Jacobians w.r.t. pose a and pose b."""
    Ra = qmatrix(q_a)
    u = Ra.T @ (t_b - t_a)
    Ja = np.hstack([-Ra.T, skew(u)])
    Jb = np.hstack([Ra.T, np.zeros((3, 3))])
    return u, Ja, Jb


def pos_jac(t_a, q_a, t_b, t_meas, weight: np.ndarray):
    """Weighted ``weight * (t_meas - R(q_a)^T (t_b - t_a))`` and its Jacobians."""
    u, Ja, Jb = relative_translation_jac(t_a, q_a, t_b)
    W = np.asarray(weight, dtype=float)[:, None]
    return W[:, 0] * (t_meas - u), -W * Ja, -W * Jb


def ori_jac(q_a, q_b, q_meas, weight: np.ndarray):
    """Weighted ``weight * (canon(q_meas^-1 q_a^-1 q_b) - q_I)`` and its Jacobians."""
    m = qmul(qconj(q_a), q_b)
    p = qmul(qconj(q_meas), m)
    s = _canon_sign(p)
    Lg = qleft(qconj(q_meas))
    # d/d dtheta_b: p * exp(dtheta); d/d dtheta_a: q_meas^-1 exp(-dtheta) m
    Jb = s * qleft(p) @ _HALF
    Ja = -s * Lg @ qright(m) @ _HALF
    W = np.asarray(weight, dtype=float)[:, None]
    z = np.zeros((4, 3))
    return W[:, 0] * (s * p - Q_IDENTITY), np.hstack([z, W * Ja]), np.hstack([z, W * Jb])


def yaw_free_jac(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``canon(qz(-yaw(q)) * q)`` (pitch/roll part only) and its derivative w.r.t. ``dtheta``."""
    R = qmatrix(q)
    a, b = R[1, 0], R[0, 0]
    yaw = math.atan2(a, b)
    da = np.array([0.0, -R[1, 2], R[1, 1]])
    db = np.array([0.0, -R[0, 2], R[0, 1]])
    dyaw = (b * da - a * db) / (a * a + b * b)
    c, sn = math.cos(-0.5 * yaw), math.sin(-0.5 * yaw)
    qz = np.array([c, 0.0, 0.0, sn])
    dqz_dyaw = -np.array([-0.5 * sn, 0.0, 0.0, 0.5 * c])
    yf = qmul(qz, q)
    sgn = _canon_sign(yf)
    J = np.outer(qmul(dqz_dyaw, q), dyaw) + qleft(qz) @ qleft(q) @ _HALF
    return sgn * yf, sgn * J


def imu_jac(q_a, q_imu, weight: float):
    """IMU pitch/roll residual ``w (canon(yf(q_imu)^-1 yf(q_a)) - q_I)`` and Jacobian w.r.t. pose a."""
    yf_a, dyf = yaw_free_jac(q_a)
    yf_i, _ = yaw_free_jac(q_imu)
    L = qleft(qconj(yf_i))
    p = L @ yf_a
    s = _canon_sign(p)
    J = np.hstack([np.zeros((4, 3)), weight * s * L @ dyf])
    return weight * (s * p - Q_IDENTITY), J


def dyn_jac(t_a, q_a, t_b, raw_a: Pose, raw_b: Pose, weight: float = 1.0):
    """z-row of ``t_odom - R(q_a)^T (t_b - t_a)`` from raw odometry poses."""
    t_odom = raw_a.rot.inverse().rotate(raw_b.trans - raw_a.trans)
    u, Ja, Jb = relative_translation_jac(t_a, q_a, t_b)
    r = weight * (t_odom[2] - u[2])
    return np.array([r]), -weight * Ja[2:3], -weight * Jb[2:3]


# ---------------------------------------------------------------------------
# value-only API on Pose objects
# ---------------------------------------------------------------------------


def residual_pos(x_a: Pose, x_b: Pose, edge, w_p) -> np.ndarray:
    w = np.asarray(w_p, dtype=float) * edge.w_gicp
    return pos_jac(x_a.trans, x_a.rot.array(), x_b.trans, np.asarray(edge.rel.trans), w)[0]


def residual_ori(x_a: Pose, x_b: Pose, edge, w_o) -> np.ndarray:
    w = np.asarray(w_o, dtype=float) * edge.w_gicp
    return ori_jac(x_a.rot.array(), x_b.rot.array(), edge.rel.rot.array(), w)[0]


def residual_imu(x_a: Pose, imu_quat: Quat, w_imu: float) -> np.ndarray:
    # Euler decomposition raises GimbalLock near pitch +-90 deg
    euler_zyx_from_quat(x_a.rot)
    euler_zyx_from_quat(imu_quat)
    return imu_jac(x_a.rot.array(), imu_quat.array(), w_imu)[0]


def residual_dyn(x_a: Pose, x_b: Pose, raw_a: Pose, raw_b: Pose) -> float:
    return float(dyn_jac(x_a.trans, x_a.rot.array(), x_b.trans, raw_a, raw_b)[0][0])


def yaw_free(q: Quat) -> Quat:
    return Quat.from_array(yaw_free_jac(q.array())[0])


def canonical_quat_residual(p: np.ndarray) -> np.ndarray:
    return qcanon(p) - Q_IDENTITY


# ---------------------------------------------------------------------------
# batched forms used by the solver; rows are blocks, same math as above
# ---------------------------------------------------------------------------


def _b(f, q: np.ndarray) -> np.ndarray:
    """Apply a first-axis-unpacking helper to ``(B, 4)`` rows, returning ``(B, ...)``."""
    return np.moveaxis(f(q.T), -1, 0)


def _bmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return qmul(a.T, b.T).T


def _bconj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _bskew(v: np.ndarray) -> np.ndarray:
    z = np.zeros(len(v))
    x, y, w = v[:, 0], v[:, 1], v[:, 2]
    return np.stack([np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], 1)


def _sign(p: np.ndarray) -> np.ndarray:
    return np.where(p[:, 0] < 0.0, -1.0, 1.0)


def batch_relative_translation(t, q, a, b):
    RaT = np.swapaxes(_b(qmatrix, q[a]), 1, 2)
    u = np.einsum("eij,ej->ei", RaT, t[b] - t[a])
    Ja = np.concatenate([-RaT, _bskew(u)], axis=2)
    Jb = np.concatenate([RaT, np.zeros_like(RaT)], axis=2)
    return u, Ja, Jb


def batch_pos(t, q, a, b, t_meas, W):
    u, Ja, Jb = batch_relative_translation(t, q, a, b)
    return W * (t_meas - u), -W[:, :, None] * Ja, -W[:, :, None] * Jb


def batch_ori(q, a, b, q_meas, W):
    m = _bmul(_bconj(q[a]), q[b])
    p = _bmul(_bconj(q_meas), m)
    s = _sign(p)[:, None, None]
    Jb = s * _b(qleft, p) @ _HALF
    Ja = -s * _b(qleft, _bconj(q_meas)) @ _b(qright, m) @ _HALF
    z = np.zeros((len(a), 4, 3))
    Wc = W[:, :, None]
    r = W * (s[:, :, 0] * p - Q_IDENTITY)
    return r, np.concatenate([z, Wc * Ja], axis=2), np.concatenate([z, Wc * Jb], axis=2)


def batch_yaw_free(q):
    R = _b(qmatrix, q)
    a, b = R[:, 1, 0], R[:, 0, 0]
    yaw = np.arctan2(a, b)
    z = np.zeros(len(q))
    da = np.stack([z, -R[:, 1, 2], R[:, 1, 1]], -1)
    db = np.stack([z, -R[:, 0, 2], R[:, 0, 1]], -1)
    dyaw = (b[:, None] * da - a[:, None] * db) / (a * a + b * b)[:, None]
    c, sn = np.cos(-0.5 * yaw), np.sin(-0.5 * yaw)
    qz = np.stack([c, z, z, sn], -1)
    dqz = -np.stack([-0.5 * sn, z, z, 0.5 * c], -1)
    yf = _bmul(qz, q)
    sg = _sign(yf)
    J = np.einsum("ei,ej->eij", _bmul(dqz, q), dyaw) + _b(qleft, qz) @ _b(qleft, q) @ _HALF
    return sg[:, None] * yf, sg[:, None, None] * J


def batch_imu(q, a, q_imu, w):
    yf_a, dyf = batch_yaw_free(q[a])
    yf_i, _ = batch_yaw_free(q_imu)
    L = _b(qleft, _bconj(yf_i))
    p = np.einsum("eij,ej->ei", L, yf_a)
    s = _sign(p)
    J = (w * s)[:, None, None] * (L @ dyf)
    r = w[:, None] * (s[:, None] * p - Q_IDENTITY)
    return r, np.concatenate([np.zeros((len(a), 4, 3)), J], axis=2)


def batch_dyn(t, q, a, b, t_odom_z, w):
    u, Ja, Jb = batch_relative_translation(t, q, a, b)
    r = w * (t_odom_z - u[:, 2])
    return r[:, None], -w[:, None, None] * Ja[:, 2:3], -w[:, None, None] * Jb[:, 2:3]
