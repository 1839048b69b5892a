"""Generalized-ICP alignment of radar clouds and fitness-based constraint weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoCorrespondences, TooFewPoints
from .geom import Pose, Quat, qfrom_matrix, so3_exp

WEIGHT_EPS = 1e-6
MIN_CLOUD = 10


@dataclass(frozen=True)
class GicpConfig:
    max_corr_dist: float = 2.0
    k_neighbors: int = 20
    max_iter: int = 50
    eps_cov: float = 1e-3
    f_th: float = 3.5
    tol: float = 1e-6


@dataclass(frozen=True, eq=False)
class GicpCloud:
    points: np.ndarray
    covariances: np.ndarray
    index: cKDTree
    k: int

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, query: np.ndarray, max_dist: float = math.inf) -> tuple[np.ndarray, np.ndarray]:
        """Distance and index of the nearest cloud point; ``inf`` / ``len`` when none within ``max_dist``."""
        return self.index.query(np.asarray(query, dtype=float), k=1, distance_upper_bound=max_dist)


@dataclass(frozen=True)
class GicpResult:
    transform: Pose
    fitness: float
    converged: bool
    iterations: int
    n_pairs: int = 0
    # (cost before, cost after) of each accepted step under that step's correspondences
    cost_history: tuple[tuple[float, float], ...] = field(default=())


def build_gicp_cloud(points: np.ndarray, k_neighbors: int = 20, eps_cov: float = 1e-3) -> GicpCloud:
    """Per-point plane-like covariances from the ``k`` nearest neighbours.

    Each sample covariance is eigen-decomposed and its spectrum replaced by
    ``(eps_cov, 1, 1)`` (smallest direction gets ``eps_cov``).
    """
    pts = np.array(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n < MIN_CLOUD:
        raise TooFewPoints(f"{n} points, need at least {MIN_CLOUD}")
    k = min(k_neighbors, n - 1)
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k + 1)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    _, vecs = np.linalg.eigh(cov)
    spectrum = np.array([eps_cov, 1.0, 1.0])
    covs = np.einsum("nik,k,njk->nij", vecs, spectrum, vecs)
    pts.setflags(write=False)
    covs.setflags(write=False)
    return GicpCloud(pts, covs, tree, k)


def _rt(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    return pose.rot.matrix(), np.array(pose.trans)


def _cost(R, t, src, tgt, M) -> float:
    e = tgt - (src @ R.T + t)
    return float(np.einsum("ni,nij,nj->", e, M, e))


def gicp_align(source: GicpCloud, target: GicpCloud, guess: Pose, cfg: GicpConfig = GicpConfig()) -> GicpResult:
    """Estimate the pose of ``source`` in ``target``'s frame (maps source points onto target).

    Gauss-Newton on SE(3) with a left perturbation ``T <- Exp(delta) T``,
    re-associating nearest neighbours every iteration. A step that raises the
    cost under its own correspondences is halved until it does not.
    """
    R, t = _rt(guess)
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
        raise ValueError("guess must be finite")
    history: list[tuple[float, float]] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        p = source.points @ R.T + t
        dist, j = target.nearest(p, cfg.max_corr_dist)
        valid = np.isfinite(dist)
        if not valid.any():
            if it == 1:
                raise NoCorrespondences("no pairs within max_corr_dist at the initial guess")
            break
        src = source.points[valid]
        tgt = target.points[j[valid]]
        M = np.linalg.inv(target.covariances[j[valid]] + R @ source.covariances[valid] @ R.T)
        pv = p[valid]
        e = tgt - pv
        J = np.zeros((len(pv), 3, 6))
        # e = q - (p + dt + dtheta x p)  =>  de/d(dt, dtheta) = [-I, [p]x]
        J[:, :, :3] = -np.eye(3)
        J[:, 0, 4], J[:, 0, 5] = -pv[:, 2], pv[:, 1]
        J[:, 1, 3], J[:, 1, 5] = pv[:, 2], -pv[:, 0]
        J[:, 2, 3], J[:, 2, 4] = -pv[:, 1], pv[:, 0]
        MJ = M @ J
        H = np.einsum("nai,naj->ij", J, MJ)
        g = np.einsum("nai,na->i", MJ, e)
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(H, g, rcond=None)[0]

        c0 = _cost(R, t, src, tgt, M)
        step = delta
        for _ in range(30):
            dR = so3_exp(step[3:])
            R_new, t_new = dR @ R, dR @ t + step[:3]
            c1 = _cost(R_new, t_new, src, tgt, M)
            if c1 <= c0:
                break
            step = 0.5 * step
        else:
            converged = True
            break
        history.append((c0, c1))
        R, t = R_new, t_new
        if np.linalg.norm(step) < cfg.tol:
            converged = True
            break

    p = source.points @ R.T + t
    dist, _ = target.nearest(p, cfg.max_corr_dist)
    ok = np.isfinite(dist)
    fitness = float(np.mean(dist[ok] ** 2)) if ok.any() else math.inf
    T = Pose(guess.t_stamp, t, Quat.from_array(qfrom_matrix(R)))
    return GicpResult(T, fitness, converged, it, int(ok.sum()), tuple(history))


def constraint_weight(f: float, f_th: float = 3.5) -> float | None:
    """``1 / (2 f + eps)``, or ``None`` (discard) when the fitness exceeds ``f_th``."""
    if f < 0:
        raise ValueError("fitness must be non-negative")
    if f > f_th or not math.isfinite(f):
        return None
    return 1.0 / (2.0 * f + WEIGHT_EPS)
