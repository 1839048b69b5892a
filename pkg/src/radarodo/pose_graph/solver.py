"""Levenberg-Marquardt over the sliding window with Tukey-robustified GICP terms."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..errors import SolverDiverged
from ..geom import Pose, Quat, qexp, qmul, qnormalize
from .residuals import batch_dyn, batch_imu, batch_ori, batch_pos
from .window import OdomConfig, WindowState, adaptive_imu_weight


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = "none"
    cost_history: list[float] = field(default_factory=list)
    edges_used: int = 0
    n_params: int = 0
    wall_time: float = 0.0


@dataclass
class _Group:
    """Blocks of one residual kind, evaluated together."""

    kind: str
    a: np.ndarray
    b: np.ndarray | None
    data: tuple
    robust_a2: np.ndarray  # per-block squared Tukey threshold; 0 disables the kernel


def tukey_rho(s: float, a2: float) -> tuple[float, float]:
    """Tukey loss and its derivative on the squared norm ``s``."""
    if a2 <= 0.0:
        return s, 1.0
    if s >= a2:
        return a2 / 3.0, 0.0
    u = 1.0 - s / a2
    # a2/3 (1 - u^3) rewritten without cancellation for s << a2
    return s / 3.0 * (1.0 + u + u * u), u * u


def _tukey_vec(s: np.ndarray, a2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    robust = a2 > 0.0
    safe = np.where(robust, a2, 1.0)
    u = np.clip(1.0 - s / safe, 0.0, None)
    rho = np.where(robust, np.where(s >= safe, safe / 3.0, s / 3.0 * (1.0 + u + u * u)), s)
    w = np.where(robust, u * u, 1.0)
    return rho, w


class WindowProblem:
    """Dense least-squares problem over the window; pose 0 is the fixed gauge anchor."""

    def __init__(self, win: WindowState, cfg: OdomConfig):
        self.cfg = cfg
        self.kfs = list(win.keyframes)
        index = {k.id: i for i, k in enumerate(self.kfs)}
        w_p = np.asarray(cfg.w_p)
        w_o = np.asarray(cfg.w_o)
        c_sigma = cfg.tukey_c * cfg.tukey_scale
        ea, eb, tm, qm, wg, a2 = [], [], [], [], [], []
        for e in win.edges.values():
            ea.append(index[e.from_id])
            eb.append(index[e.to_id])
            tm.append(e.rel.trans)
            qm.append(e.rel.rot.array())
            wg.append(e.w_gicp)
            # threshold scales with w_gicp so rejection depends on the geometric error only
            a2.append((c_sigma * e.w_gicp) ** 2)
        for ia, ib in sorted(win.odom_links):
            rel = self.kfs[index[ia]].raw_odom_pose.between(self.kfs[index[ib]].raw_odom_pose)
            ea.append(index[ia])
            eb.append(index[ib])
            tm.append(rel.trans)
            qm.append(rel.rot.array())
            wg.append(cfg.w_link)
            a2.append(0.0)
        groups: list[_Group] = []
        if ea:
            a, b, wg_ = np.array(ea), np.array(eb), np.array(wg)
            a2_ = np.array(a2)
            groups.append(_Group("pos", a, b, (np.array(tm).reshape(-1, 3), wg_[:, None] * w_p), a2_))
            groups.append(_Group("ori", a, b, (np.array(qm).reshape(-1, 4), wg_[:, None] * w_o), a2_))
        k = len(self.kfs)
        if k > 1:
            idx = np.arange(1, k)
            q_imu = np.array([kf.imu_quat.array() for kf in self.kfs[1:]])
            w_imu = np.array([adaptive_imu_weight(kf, win) for kf in self.kfs[1:]])
            groups.append(_Group("imu", idx, None, (q_imu, w_imu), np.zeros(k - 1)))
            t_odom_z = np.array(
                [
                    self.kfs[i].raw_odom_pose.between(self.kfs[i + 1].raw_odom_pose).trans[2]
                    for i in range(k - 1)
                ]
            )
            groups.append(
                _Group("dyn", np.arange(k - 1), np.arange(1, k), (t_odom_z, np.full(k - 1, cfg.w_dyn)), np.zeros(k - 1))
            )
        self.groups = groups
        self.edges_used = len(win.edges)
        self.n_params = 6 * (k - 1)

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        t = np.array([k.pose.trans for k in self.kfs])
        q = np.array([k.pose.rot.array() for k in self.kfs])
        return t, q

    def group_eval(self, g: _Group, t: np.ndarray, q: np.ndarray):
        """Residuals ``(B, d)`` and Jacobians ``(B, d, 6)`` w.r.t. pose a and pose b (None if unary)."""
        if g.kind == "pos":
            return batch_pos(t, q, g.a, g.b, *g.data)
        if g.kind == "ori":
            return batch_ori(q, g.a, g.b, *g.data)
        if g.kind == "imu":
            r, J = batch_imu(q, g.a, *g.data)
            return r, J, None
        return batch_dyn(t, q, g.a, g.b, *g.data)

    def cost(self, t: np.ndarray, q: np.ndarray) -> float:
        total = 0.0
        for g in self.groups:
            r = self.group_eval(g, t, q)[0]
            total += float(np.sum(_tukey_vec(np.sum(r * r, axis=1), g.robust_a2)[0]))
        return 0.5 * total

    def linearize(self, t: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        k = len(self.kfs)
        rows_r, rows_J, rows_w = [], [], []
        total = 0.0
        cols = np.arange(6)
        for g in self.groups:
            r, Ja, Jb = self.group_eval(g, t, q)
            nb, d = r.shape
            rho, w = _tukey_vec(np.sum(r * r, axis=1), g.robust_a2)
            total += float(np.sum(rho))
            J = np.zeros((nb, d, 6 * k))
            bi = np.arange(nb)[:, None, None]
            di = np.arange(d)[None, :, None]
            J[bi, di, 6 * g.a[:, None, None] + cols] = Ja
            if Jb is not None:
                J[bi, di, 6 * g.b[:, None, None] + cols] = Jb
            rows_r.append(r.reshape(-1))
            rows_J.append(J.reshape(nb * d, 6 * k))
            rows_w.append(np.repeat(w, d))
        r = np.concatenate(rows_r)
        J = np.concatenate(rows_J)[:, 6:]
        w = np.concatenate(rows_w)
        Jw = J * w[:, None]
        return 0.5 * total, Jw.T @ J, Jw.T @ r

    def retract(self, t: np.ndarray, q: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t2, q2 = t.copy(), q.copy()
        for i in range(1, len(self.kfs)):
            d = delta[6 * (i - 1) : 6 * i]
            t2[i] = t[i] + d[:3]
            q2[i] = qnormalize(qmul(q[i], qexp(d[3:])))
        return t2, q2


def optimize_window(win: WindowState, cfg: OdomConfig = OdomConfig(), strict: bool = False) -> SolveReport:
    """Minimize the robustified window cost; writes optimized poses back into the keyframes.

    Stops after ``cfg.max_iter`` iterations (accepted or rejected), when the
    relative cost decrease falls below ``function_tolerance`` or when the
    gradient infinity-norm falls below ``gradient_tolerance``. If the damping
    exceeds ``lambda_max`` the window keeps its last accepted state; with
    ``strict`` a :class:`SolverDiverged` is raised instead of only being reported.
    """
    t0 = time.perf_counter()
    report = SolveReport()
    if len(win.keyframes) < 2:
        report.termination = "too_few_keyframes"
        return report
    prob = WindowProblem(win, cfg)
    report.edges_used, report.n_params = prob.edges_used, prob.n_params
    t, q = prob.initial_state()
    F, H, g = prob.linearize(t, q)
    report.initial_cost = F
    report.cost_history.append(F)
    lam = cfg.lambda_init
    changed = False
    it = 0
    while it < cfg.max_iter:
        if np.max(np.abs(g)) < cfg.gradient_tolerance:
            report.termination = "gradient_tolerance"
            break
        it += 1
        D = np.clip(np.diag(H), 1e-6, 1e32)
        try:
            delta = cho_solve(cho_factor(H + lam * np.diag(D)), -g)
        except np.linalg.LinAlgError:
            delta = None
        if delta is not None and np.all(np.isfinite(delta)):
            t_new, q_new = prob.retract(t, q, delta)
            F_new = prob.cost(t_new, q_new)
        else:
            F_new = math.inf
        if F_new <= F:
            decrease = F - F_new
            t, q = t_new, q_new
            changed = True
            report.cost_history.append(F_new)
            lam = max(lam / 10.0, 1e-16)
            if decrease <= cfg.function_tolerance * F:
                F = F_new
                report.termination = "function_tolerance"
                break
            F, H, g = prob.linearize(t, q)
        else:
            if F_new - F <= cfg.function_tolerance * F:
                # rejected only by round-off at the cost floor
                report.termination = "function_tolerance"
                break
            lam *= 10.0
            if lam > cfg.lambda_max:
                report.termination = "diverged"
                break
    else:
        report.termination = "max_iterations"
    report.iterations = it
    report.final_cost = F
    if changed:
        for i, k in enumerate(prob.kfs):
            if i > 0:
                k.pose = Pose(k.pose.t_stamp, t[i], Quat.from_array(q[i]))
    report.wall_time = time.perf_counter() - t0
    if strict and report.termination == "diverged":
        raise SolverDiverged(f"damping exceeded {cfg.lambda_max} at cost {F}")
    return report
