"""Sliding-window pose-graph odometry."""

from .propagation import imu_yaw_update, keyframe_gate, propagate_pose
from .residuals import residual_dyn, residual_imu, residual_ori, residual_pos, yaw_free
from .solver import SolveReport, WindowProblem, optimize_window, tukey_rho
from .window import (
    AddReport,
    GicpConstraintEdge,
    Keyframe,
    OdomConfig,
    WindowState,
    adaptive_imu_weight,
    add_keyframe,
)

__all__ = [
    "AddReport",
    "GicpConstraintEdge",
    "Keyframe",
    "OdomConfig",
    "SolveReport",
    "WindowProblem",
    "WindowState",
    "adaptive_imu_weight",
    "add_keyframe",
    "imu_yaw_update",
    "keyframe_gate",
    "optimize_window",
    "propagate_pose",
    "residual_dyn",
    "residual_imu",
    "residual_ori",
    "residual_pos",
    "tukey_rho",
    "yaw_free",
]
