"""Quaternion and pose algebra, Euler decomposition and IMU stream access.

Quaternions are stored as ``(w, x, y, z)`` with Hamilton product convention.
Every product is canonicalized to the ``w >= 0`` hemisphere so that
componentwise quaternion differences are well defined.

The array helpers prefixed ``q`` operate on raw ``(4,)`` numpy arrays and are
what the hot loops (GICP, pose-graph Jacobians) use; :class:`Quat` and
:class:`Pose` are the immutable value types exposed to the rest of the API.
"""

from __future__ import annotations

import bisect
import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import GimbalLock, OutOfRange, ParseError

GIMBAL_GUARD = 1e-3
_SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# raw-array quaternion helpers
# ---------------------------------------------------------------------------


def qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two ``(w, x, y, z)`` arrays (not canonicalized)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def qconj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def qcanon(q: np.ndarray) -> np.ndarray:
    return -q if q[0] < 0.0 else q


def qnormalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(np.dot(q, q)))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return qcanon(np.asarray(q, dtype=float) / n)


def qleft(q: np.ndarray) -> np.ndarray:
    """Matrix ``L(q)`` with ``q * p == L(q) @ p``."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def qright(q: np.ndarray) -> np.ndarray:
    """Matrix ``R(q)`` with ``p * q == R(q) @ p``."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


def qexp(v: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation vector."""
    v = np.asarray(v, dtype=float)
    theta = math.sqrt(float(np.dot(v, v)))
    if theta < _SMALL_ANGLE:
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return q / np.linalg.norm(q)
    s = math.sin(0.5 * theta) / theta
    return np.array([math.cos(0.5 * theta), s * v[0], s * v[1], s * v[2]])


def qlog(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion; magnitude is at most pi."""
    q = qcanon(q)
    vn = math.sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if vn < _SMALL_ANGLE:
        return 2.0 * q[1:] / q[0]
    angle = 2.0 * math.atan2(vn, q[0])
    return (angle / vn) * q[1:]


def qmatrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def qfrom_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonical unit quaternion."""
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return qnormalize(np.array(q))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix of a rotation vector."""
    theta = math.sqrt(float(np.dot(v, v)))
    k = skew(v)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + (math.sin(theta) / theta) * k + ((1 - math.cos(theta)) / theta**2) * k @ k


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Quat:
    """Unit quaternion ``(w, x, y, z)``, normalized and canonicalized on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self) -> None:
        q = qnormalize(np.array([self.w, self.x, self.y, self.z], dtype=float))
        for name, value in zip("wxyz", q):
            object.__setattr__(self, name, float(value))

    @classmethod
    def from_array(cls, q: Sequence[float]) -> Quat:
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def identity(cls) -> Quat:
        return cls()

    @classmethod
    def from_rotvec(cls, v: Sequence[float]) -> Quat:
        return cls.from_array(qexp(np.asarray(v, dtype=float)))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Quat:
        return cls.from_array(qfrom_matrix(np.asarray(m, dtype=float)))

    def array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def __iter__(self) -> Iterator[float]:
        return iter((self.w, self.x, self.y, self.z))

    def __mul__(self, other: Quat) -> Quat:
        return Quat.from_array(qmul(self.array(), other.array()))

    def inverse(self) -> Quat:
        return Quat(self.w, -self.x, -self.y, -self.z)

    def matrix(self) -> np.ndarray:
        return qmatrix(self.array())

    def rotate(self, v: Sequence[float]) -> np.ndarray:
        return qmatrix(self.array()) @ np.asarray(v, dtype=float)

    def rotvec(self) -> np.ndarray:
        return qlog(self.array())

    def angle(self) -> float:
        """Rotation angle in radians, in ``[0, pi]``."""
        return float(np.linalg.norm(self.rotvec()))

    def angle_to(self, other: Quat) -> float:
        return (self.inverse() * other).angle()


class EulerZYX(NamedTuple):
    """Intrinsic Z-Y-X angles in radians."""

    yaw: float
    pitch: float
    roll: float


def quat_boxplus(q: Quat, delta: Sequence[float]) -> Quat:
    """``q * exp(delta)`` with ``delta`` a rotation vector in the local tangent space."""
    return Quat.from_array(qmul(q.array(), qexp(np.asarray(delta, dtype=float))))


def quat_boxminus(a: Quat, b: Quat) -> np.ndarray:
    """``log(b^-1 * a)``; the inverse of :func:`quat_boxplus` with respect to ``b``."""
    return qlog(qmul(qconj(b.array()), a.array()))


def euler_zyx_from_quat(q: Quat) -> EulerZYX:
    w, x, y, z = q
    sinp = 2.0 * (w * y - x * z)
    # hypot(R21, R22) == |cos(pitch)|; atan2 keeps precision near the guard
    cosp = math.hypot(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    pitch = math.atan2(sinp, cosp)
    if abs(pitch) > math.pi / 2 - GIMBAL_GUARD:
        raise GimbalLock(f"pitch {pitch:.6f} rad is within {GIMBAL_GUARD} of +-pi/2")
    yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    return EulerZYX(yaw, pitch, roll)


def quat_from_euler_zyx(e: EulerZYX | Sequence[float]) -> Quat:
    yaw, pitch, roll = e
    cy, sy = math.cos(0.5 * yaw), math.sin(0.5 * yaw)
    cp, sp = math.cos(0.5 * pitch), math.sin(0.5 * pitch)
    cr, sr = math.cos(0.5 * roll), math.sin(0.5 * roll)
    return Quat(
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    )


def yaw_of(q: np.ndarray) -> float:
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def slerp(a: Quat, b: Quat, s: float) -> Quat:
    qa, qb = a.array(), b.array()
    d = float(np.dot(qa, qb))
    if d < 0.0:
        qb, d = -qb, -d
    if d > 1.0 - 1e-12:
        return Quat.from_array(qa + s * (qb - qa))
    omega = math.acos(min(d, 1.0))
    so = math.sin(omega)
    return Quat.from_array((math.sin((1 - s) * omega) / so) * qa + (math.sin(s * omega) / so) * qb)


@dataclass(frozen=True, slots=True)
class Pose:
    """Timestamped rigid transform (body to world); translation in meters."""

    t_stamp: float = 0.0
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot: Quat = field(default_factory=Quat)

    def __post_init__(self) -> None:
        t = np.array(self.trans, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "trans", t)
        if not isinstance(self.rot, Quat):
            object.__setattr__(self, "rot", Quat.from_array(self.rot))

    @classmethod
    def identity(cls, t_stamp: float = 0.0) -> Pose:
        return cls(t_stamp)

    @classmethod
    def from_matrix(cls, m: np.ndarray, t_stamp: float = 0.0) -> Pose:
        return cls(t_stamp, m[:3, 3], Quat.from_matrix(m[:3, :3]))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rot.matrix()
        m[:3, 3] = self.trans
        return m

    def compose(self, other: Pose) -> Pose:
        """``self * other``; the result carries ``other``'s timestamp."""
        return Pose(other.t_stamp, self.trans + self.rot.rotate(other.trans), self.rot * other.rot)

    def inverse(self) -> Pose:
        inv = self.rot.inverse()
        return Pose(self.t_stamp, -inv.rotate(self.trans), inv)

    def between(self, other: Pose) -> Pose:
        """Relative transform ``self^-1 * other``."""
        return self.inverse().compose(other)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rot.matrix().T + self.trans

    def with_stamp(self, t_stamp: float) -> Pose:
        return Pose(t_stamp, self.trans, self.rot)


# ---------------------------------------------------------------------------
# IMU
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ImuSample:
    t_stamp: float
    orientation: Quat
    ang_vel: np.ndarray
    lin_acc: np.ndarray

    def __post_init__(self) -> None:
        for name in ("ang_vel", "lin_acc"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            v.setflags(write=False)
            object.__setattr__(self, name, v)


def imu_orientation_at(stream: Sequence[ImuSample], t: float) -> Quat:
    """Slerp the fused IMU attitude at time ``t``."""
    if not stream or t < stream[0].t_stamp or t > stream[-1].t_stamp:
        span = (stream[0].t_stamp, stream[-1].t_stamp) if stream else None
        raise OutOfRange(f"t={t} outside IMU span {span}")
    stamps = [s.t_stamp for s in stream] if not isinstance(stream, ImuBuffer) else stream.stamps
    i = bisect.bisect_left(stamps, t)
    if stamps[i] == t:
        return stream[i].orientation
    a, b = stream[i - 1], stream[i]
    return slerp(a.orientation, b.orientation, (t - a.t_stamp) / (b.t_stamp - a.t_stamp))


def imu_samples_between(stream: Sequence[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples covering ``[t0, t1]`` with interpolated endpoints prepended/appended."""
    stamps = stream.stamps if isinstance(stream, ImuBuffer) else [s.t_stamp for s in stream]
    if not stamps or t0 < stamps[0] or t1 > stamps[-1]:
        raise OutOfRange(f"[{t0}, {t1}] outside IMU span")
    lo = bisect.bisect_left(stamps, t0)
    hi = bisect.bisect_right(stamps, t1)
    out = [stream[i] for i in range(lo, hi)]
    if not out or out[0].t_stamp > t0:
        out.insert(0, _interp_sample(stream, stamps, t0))
    if out[-1].t_stamp < t1:
        out.append(_interp_sample(stream, stamps, t1))
    return out


def _interp_sample(stream, stamps, t: float) -> ImuSample:
    i = bisect.bisect_left(stamps, t)
    if stamps[i] == t:
        return stream[i]
    a, b = stream[i - 1], stream[i]
    s = (t - a.t_stamp) / (b.t_stamp - a.t_stamp)
    return ImuSample(
        t,
        slerp(a.orientation, b.orientation, s),
        (1 - s) * a.ang_vel + s * b.ang_vel,
        (1 - s) * a.lin_acc + s * b.lin_acc,
    )


class ImuBuffer(Sequence[ImuSample]):
    """Lazily filled, prunable window over an IMU sample iterator.

    Keeps memory bounded on long streams: callers ``ensure(t)`` before querying
    and ``discard_before(t)`` once older data is no longer needed.
    """

    def __init__(self, samples: Iterable[ImuSample]):
        self._it = iter(samples)
        self._buf: deque[ImuSample] = deque()
        self.stamps: list[float] = []
        self._exhausted = False

    def ensure(self, t: float) -> bool:
        """Read until the buffer covers ``t``; False if the stream ends first."""
        while not self.stamps or self.stamps[-1] < t:
            if self._exhausted:
                return False
            try:
                s = next(self._it)
            except StopIteration:
                self._exhausted = True
                return False
            if self.stamps and s.t_stamp <= self.stamps[-1]:
                raise ValueError(f"IMU stamps not strictly increasing at t={s.t_stamp}")
            self._buf.append(s)
            self.stamps.append(s.t_stamp)
        return True

    def discard_before(self, t: float) -> None:
        """Drop samples strictly older than the last sample at or before ``t``."""
        keep = max(bisect.bisect_right(self.stamps, t) - 1, 0)
        for _ in range(keep):
            self._buf.popleft()
        del self.stamps[:keep]

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, i):  # type: ignore[override]
        return self._buf[i]


def iter_imu_csv(path: str | Path) -> Iterator[ImuSample]:
    """Stream ``t, qw, qx, qy, qz, wx, wy, wz, ax, ay, az`` rows; ``#`` lines are skipped."""
    last_t = -math.inf
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 11:
                raise ParseError(lineno, f"expected 11 fields, got {len(parts)}", str(path))
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(lineno, f"non-numeric field ({exc})", str(path)) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(lineno, "non-finite value", str(path))
            if vals[0] <= last_t:
                raise ParseError(lineno, "timestamps not strictly increasing", str(path))
            last_t = vals[0]
            try:
                q = Quat(*vals[1:5])
            except ValueError:
                raise ParseError(lineno, "zero quaternion", str(path)) from None
            yield ImuSample(vals[0], q, vals[5:8], vals[8:11])


def read_imu_csv(path: str | Path) -> list[ImuSample]:
    return list(iter_imu_csv(path))


def write_imu_csv(path: str | Path, samples: Iterable[ImuSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fh.write("# t,qw,qx,qy,qz,wx,wy,wz,ax,ay,az\n")
        for s in samples:
            w.writerow([repr(float(v)) for v in (s.t_stamp, *s.orientation, *s.ang_vel, *s.lin_acc)])
