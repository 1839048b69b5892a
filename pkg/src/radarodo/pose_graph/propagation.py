"""Dead-reckoning between radar scans and keyframe selection."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..geom import EulerZYX, ImuSample, Pose, Quat, euler_zyx_from_quat, quat_from_euler_zyx


def propagate_pose(prev: Pose, v_ego, q_prev: Quat, q_curr: Quat, dt: float, t_stamp: float | None = None) -> Pose:
    """Compose ``prev`` with the motion ``(v * dt, q_prev^-1 q_curr)`` expressed in ``prev``'s body frame."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = np.asarray(getattr(v_ego, "v", v_ego), dtype=float)
    rel = Pose(prev.t_stamp + dt if t_stamp is None else t_stamp, v * dt, q_prev.inverse() * q_curr)
    return prev.compose(rel)


def yaw_rate(sample: ImuSample) -> float:
    """World yaw rate from body rates using the Z-Y-X attitude kinematics."""
    e = euler_zyx_from_quat(sample.orientation)
    wx, wy, wz = sample.ang_vel
    return (math.sin(e.roll) * wy + math.cos(e.roll) * wz) / math.cos(e.pitch)


def imu_yaw_update(prev_quat: Quat, samples: Sequence[ImuSample]) -> Quat:
    """Advance yaw by trapezoidal integration of gyro rates; take pitch/roll from the fused attitude.

    ``samples`` must span the integration interval (first and last stamps are
    its ends). With a single sample the yaw is unchanged.
    """
    yaw = euler_zyx_from_quat(prev_quat).yaw
    rates = [yaw_rate(s) for s in samples]
    for a, b, ra, rb in zip(samples, samples[1:], rates, rates[1:]):
        yaw += 0.5 * (ra + rb) * (b.t_stamp - a.t_stamp)
    att = euler_zyx_from_quat(samples[-1].orientation) if samples else euler_zyx_from_quat(prev_quat)
    yaw = math.atan2(math.sin(yaw), math.cos(yaw))
    return quat_from_euler_zyx(EulerZYX(yaw, att.pitch, att.roll))


def keyframe_gate(curr: Pose, last_kf: Pose, trans_threshold: float = 1.0, rot_threshold_deg: float = 5.0) -> bool:
    d = last_kf.between(curr)
    return bool(
        np.linalg.norm(d.trans) >= trans_threshold or math.degrees(d.rot.angle()) >= rot_threshold_deg
    )
