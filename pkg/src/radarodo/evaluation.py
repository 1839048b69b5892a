"""Trajectory accuracy metrics: absolute (aligned or not) and relative per sub-trajectory length."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import Degenerate, NoOverlap, ParseError, TooShort
from .geom import Pose, Quat

log = logging.getLogger(__name__)

DESK_LENGTHS = (5.0, 10.0, 15.0, 20.0, 25.0)
ROAD_LENGTHS = (50.0, 100.0, 150.0, 200.0, 250.0)


class Trajectory(Sequence[Pose]):
    """Poses with strictly increasing stamps."""

    def __init__(self, poses: Iterable[Pose]):
        self.poses = list(poses)
        stamps = [p.t_stamp for p in self.poses]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("trajectory stamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @property
    def stamps(self) -> np.ndarray:
        return np.array([p.t_stamp for p in self.poses])

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.trans for p in self.poses]).reshape(-1, 3)


@dataclass
class PosePairs:
    est: list[Pose]
    gt: list[Pose]

    def __len__(self) -> int:
        return len(self.est)


@dataclass
class MetricsReport:
    t_rel: float
    r_rel: float
    t_abs: float
    t_abs_x: float
    t_abs_y: float
    t_abs_z: float
    aligned: bool = True
    # "se3", "translation" (collinear fallback) or "none"
    alignment: str = "se3"
    n_pairs: int = 0
    per_length: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# ---------------------------------------------------------------------------
# TUM I/O
# ---------------------------------------------------------------------------


def format_tum(pose: Pose) -> str:
    w, x, y, z = pose.rot.array()
    tx, ty, tz = pose.trans
    return " ".join(repr(float(v)) for v in (pose.t_stamp, tx, ty, tz, x, y, z, w))


def write_tum(path: str | Path, poses: Iterable[Pose]) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(format_tum(p) + "\n")


def read_tum(path: str | Path) -> Trajectory:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(lineno, f"expected 8 fields, got {len(parts)}", str(path))
            try:
                t, x, y, z, qx, qy, qz, qw = (float(v) for v in parts)
            except ValueError:
                raise ParseError(lineno, "non-numeric field", str(path)) from None
            q = np.array([qw, qx, qy, qz])
            if not np.all(np.isfinite(q)) or np.linalg.norm(q) < 1e-12:
                raise ParseError(lineno, "invalid quaternion", str(path))
            if poses and t <= poses[-1].t_stamp:
                raise ParseError(lineno, "timestamps not monotonic", str(path))
            poses.append(Pose(t, np.array([x, y, z]), Quat.from_array(q)))
    return Trajectory(poses)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def associate(est: Sequence[Pose], gt: Sequence[Pose], max_dt: float = 0.05) -> PosePairs:
    """Pair every estimate with its nearest ground-truth stamp within ``max_dt``.

    Each ground-truth pose is used at most once; estimates are visited in
    time order and a tie goes to the earlier ground-truth stamp.
    """
    gs = np.array([p.t_stamp for p in gt])
    used = np.zeros(len(gs), dtype=bool)
    out_e, out_g = [], []
    for e in est:
        j = int(np.searchsorted(gs, e.t_stamp))
        best, best_dt = -1, math.inf
        # scan outwards over unused neighbours; stop once stamps are out of reach
        lo, hi = j - 1, j
        while lo >= 0 and e.t_stamp - gs[lo] <= max_dt:
            if not used[lo]:
                best, best_dt = lo, e.t_stamp - gs[lo]
                break
            lo -= 1
        while hi < len(gs) and gs[hi] - e.t_stamp <= max_dt:
            if not used[hi]:
                if gs[hi] - e.t_stamp < best_dt:
                    best, best_dt = hi, gs[hi] - e.t_stamp
                break
            hi += 1
        if best >= 0:
            used[best] = True
            out_e.append(e)
            out_g.append(gt[best])
    if not out_e:
        raise NoOverlap(f"no stamps paired within {max_dt} s")
    return PosePairs(out_e, out_g)


def align_se3(pairs: PosePairs) -> Pose:
    """Least-squares rigid transform ``T`` (no scale) minimizing sum |gt - T est|^2."""
    P = np.array([p.trans for p in pairs.est])
    G = np.array([p.trans for p in pairs.gt])
    if len(P) < 3:
        raise Degenerate("alignment needs at least 3 positions")
    mp, mg = P.mean(axis=0), G.mean(axis=0)
    Pc, Gc = P - mp, G - mg
    s = np.linalg.svd(Pc, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-12):
        raise Degenerate("positions are collinear")
    U, _, Vt = np.linalg.svd(Gc.T @ Pc)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    t = mg - R @ mp
    return Pose(0.0, t, Quat.from_matrix(R))


def align_translation(pairs: PosePairs) -> Pose:
    P = np.array([p.trans for p in pairs.est])
    G = np.array([p.trans for p in pairs.gt])
    return Pose(0.0, G.mean(axis=0) - P.mean(axis=0), Quat())


def _apply(T: Pose, pts: np.ndarray) -> np.ndarray:
    return pts @ T.rot.matrix().T + T.trans


def absolute_errors(pairs: PosePairs, alignment: Pose | None = None) -> dict[str, float]:
    if len(pairs) == 0:
        raise NoOverlap("empty pairing")
    P = np.array([p.trans for p in pairs.est])
    G = np.array([p.trans for p in pairs.gt])
    if alignment is not None:
        P = _apply(alignment, P)
    d = G - P
    rms = np.sqrt(np.mean(d**2, axis=0))
    return {
        "t_abs": float(np.sqrt(np.mean(np.sum(d**2, axis=1)))),
        "t_abs_x": float(rms[0]),
        "t_abs_y": float(rms[1]),
        "t_abs_z": float(rms[2]),
    }


def _cumulative_distance(poses: Sequence[Pose]) -> np.ndarray:
    pts = np.array([p.trans for p in poses])
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])


def relative_errors(pairs: PosePairs, subtraj_lengths: Sequence[float] = DESK_LENGTHS) -> dict:
    """Translation error (% of length) and rotation error (deg/m) over sub-trajectories.

    For every start index the end index is the first pose whose ground-truth
    distance travelled reaches ``L``. Errors are RMS over start indices and
    then averaged over lengths.
    """
    dist = _cumulative_distance(pairs.gt)
    if not subtraj_lengths or dist[-1] < max(subtraj_lengths):
        raise TooShort(f"trajectory length {dist[-1]:.2f} m < {max(subtraj_lengths or [0])} m")
    per_len = []
    for L in subtraj_lengths:
        t_err, r_err = [], []
        ends = np.searchsorted(dist, dist + L)
        for i, j in enumerate(ends):
            if j >= len(dist):
                break
            dg = pairs.gt[i].between(pairs.gt[j])
            de = pairs.est[i].between(pairs.est[j])
            err = dg.between(de)
            t_err.append(float(np.linalg.norm(err.trans)))
            r_err.append(math.degrees(err.rot.angle()))
        if not t_err:
            raise TooShort(f"no sub-trajectory of length {L} m")
        t_rms = math.sqrt(np.mean(np.square(t_err)))
        r_rms = math.sqrt(np.mean(np.square(r_err)))
        per_len.append({"length": float(L), "n": len(t_err), "t_rel": t_rms / L * 100.0, "r_rel": r_rms / L})
    return {
        "t_rel": float(np.mean([p["t_rel"] for p in per_len])),
        "r_rel": float(np.mean([p["r_rel"] for p in per_len])),
        "per_length": per_len,
    }


def evaluate(
    est: Sequence[Pose],
    gt: Sequence[Pose],
    align: bool = True,
    max_dt: float = 0.05,
    subtraj_lengths: Sequence[float] = DESK_LENGTHS,
) -> MetricsReport:
    pairs = associate(est, gt, max_dt)
    T, mode = None, "none"
    if align:
        try:
            T, mode = align_se3(pairs), "se3"
        except Degenerate as exc:
            # rotation about a straight path is unobservable; match centroids only
            log.warning("SE(3) alignment unavailable (%s); using translation-only alignment", exc)
            T, mode = align_translation(pairs), "translation"
    ab = absolute_errors(pairs, T)
    rel = relative_errors(pairs, subtraj_lengths)
    return MetricsReport(
        t_rel=rel["t_rel"],
        r_rel=rel["r_rel"],
        aligned=align,
        alignment=mode,
        n_pairs=len(pairs),
        per_length=rel["per_length"],
        **ab,
    )


def write_per_length_csv(path: str | Path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["length_m", "n", "t_rel_pct", "r_rel_deg_per_m"])
        for row in report.per_length:
            w.writerow([row["length"], row["n"], row["t_rel"], row["r_rel"]])


def rotation_rmse_deg(pairs: PosePairs) -> float:
    """RMS of the per-pair rotation angle error, in degrees."""
    errs = [math.degrees(g.rot.angle_to(e.rot)) for e, g in zip(pairs.est, pairs.gt)]
    return float(math.sqrt(np.mean(np.square(errs))))


__all__ = [
    "DESK_LENGTHS",
    "ROAD_LENGTHS",
    "MetricsReport",
    "PosePairs",
    "Trajectory",
    "absolute_errors",
    "align_se3",
    "align_translation",
    "associate",
    "evaluate",
    "format_tum",
    "read_tum",
    "relative_errors",
    "rotation_rmse_deg",
    "write_per_length_csv",
    "write_tum",
]
