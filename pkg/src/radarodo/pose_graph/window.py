"""Sliding window of keyframes and the GICP constraint mesh between them."""

from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np

from ..errors import RadarOdoError
from ..geom import Pose, Quat
from ..gicp import GicpCloud, GicpConfig, constraint_weight, gicp_align

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OdomConfig:
    trans_threshold: float = 1.0
    rot_threshold_deg: float = 5.0
    window: int = 10
    w_p: tuple[float, float, float] = (0.1, 0.1, 0.1)
    w_o: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    w_dyn: float = 1.0
    # weight of the raw-odometry link used only for keyframes left without GICP edges
    w_link: float = 1.0
    tukey_c: float = 4.685
    tukey_scale: float = 0.01
    max_iter: int = 100
    function_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10
    lambda_init: float = 1e-4
    lambda_max: float = 1e8

    def __post_init__(self) -> None:
        if self.trans_threshold <= 0 or self.rot_threshold_deg <= 0 or self.window < 2:
            raise ValueError("thresholds must be positive and window >= 2")
        if min(self.w_p) < 0 or min(self.w_o) < 0 or self.w_dyn < 0:
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "w_p", tuple(float(v) for v in self.w_p))
        object.__setattr__(self, "w_o", tuple(float(v) for v in self.w_o))


@dataclass(eq=False)
class Keyframe:
    id: int
    pose: Pose
    cloud: GicpCloud | None
    raw_odom_pose: Pose
    imu_quat: Quat

    @property
    def t_stamp(self) -> float:
        return self.pose.t_stamp


@dataclass(frozen=True)
class GicpConstraintEdge:
    from_id: int
    to_id: int
    rel: Pose
    w_gicp: float
    fitness: float = 0.0

    def __post_init__(self) -> None:
        if self.from_id >= self.to_id:
            raise ValueError("edges must point from the older to the newer keyframe")
        if self.w_gicp is None or self.w_gicp < 0:
            raise ValueError("discarded alignments cannot be stored as edges")


@dataclass
class AddReport:
    keyframe_id: int
    edges_added: list[GicpConstraintEdge] = field(default_factory=list)
    discarded: list[tuple[int, float]] = field(default_factory=list)
    failed: list[tuple[int, str]] = field(default_factory=list)
    retired_id: int | None = None
    degenerate: bool = False


@dataclass
class WindowState:
    n: int = 10
    keyframes: list[Keyframe] = field(default_factory=list)
    edges: dict[tuple[int, int], GicpConstraintEdge] = field(default_factory=dict)
    # fallback raw-odometry links (older id, newer id) for keyframes without GICP edges
    odom_links: set[tuple[int, int]] = field(default_factory=set)
    retired: list[Pose] = field(default_factory=list)

    def ids(self) -> list[int]:
        return [k.id for k in self.keyframes]

    def get(self, kf_id: int) -> Keyframe:
        for k in self.keyframes:
            if k.id == kf_id:
                return k
        raise KeyError(kf_id)

    def incident_edges(self, kf_id: int) -> list[GicpConstraintEdge]:
        return [e for e in self.edges.values() if kf_id in (e.from_id, e.to_id)]

    def trajectory(self) -> list[Pose]:
        return list(self.retired) + [k.pose for k in self.keyframes]

    def retire_oldest(self) -> Keyframe:
        old = self.keyframes.pop(0)
        self.retired.append(old.pose)
        self.edges = {k: e for k, e in self.edges.items() if old.id not in k}
        self.odom_links = {k for k in self.odom_links if old.id not in k}
        return old


def add_keyframe(
    win: WindowState,
    kf: Keyframe,
    gicp_cfg: GicpConfig = GicpConfig(),
    executor: Executor | None = None,
) -> AddReport:
    """Insert ``kf``, align it against every keyframe still in the window, store kept edges.

    The oldest keyframe is retired first when the window is full, so a new
    keyframe gains at most ``n - 1`` edges. Alignment failures are recorded
    and skipped.
    """
    if win.keyframes and kf.id <= win.keyframes[-1].id:
        raise ValueError("keyframe ids must increase")
    report = AddReport(kf.id)
    if len(win.keyframes) >= win.n:
        report.retired_id = win.retire_oldest().id

    others = list(win.keyframes)

    def job(other: Keyframe):
        guess = other.pose.between(kf.pose)
        return gicp_align(kf.cloud, other.cloud, guess, gicp_cfg)

    results: list = []
    if kf.cloud is not None:
        usable = [o for o in others if o.cloud is not None]
        if executor is not None:
            futures = [(o, executor.submit(job, o)) for o in usable]
            gathered = []
            for o, fut in futures:
                try:
                    gathered.append((o, fut.result(), None))
                except RadarOdoError as exc:
                    gathered.append((o, None, exc))
            results = gathered
        else:
            for o in usable:
                try:
                    results.append((o, job(o), None))
                except RadarOdoError as exc:
                    results.append((o, None, exc))

    for other, res, exc in results:
        if exc is not None:
            report.failed.append((other.id, str(exc)))
            continue
        w = constraint_weight(res.fitness, gicp_cfg.f_th)
        if w is None:
            report.discarded.append((other.id, res.fitness))
            continue
        edge = GicpConstraintEdge(other.id, kf.id, res.transform, w, res.fitness)
        win.edges[(other.id, kf.id)] = edge
        report.edges_added.append(edge)

    if others and not report.edges_added:
        report.degenerate = True
        win.odom_links.add((others[-1].id, kf.id))
        log.warning("keyframe %d has no GICP edge; linking by raw odometry", kf.id)
    win.keyframes.append(kf)
    return report


def adaptive_imu_weight(kf: Keyframe | int, win: WindowState) -> float:
    """Clamped reciprocal of the best GICP weight touching the keyframe."""
    kf_id = kf if isinstance(kf, int) else kf.id
    ws = [e.w_gicp for e in win.incident_edges(kf_id)]
    best = max(ws) if ws else 0.0
    return float(np.clip(1.0 / (best + 1e-6), 0.1, 10.0))
