"""Two-stage odometry runner: cloud processing feeds the window optimizer through a bounded queue.

Stage 1 gates and downsamples each scan, estimates the ego-velocity and
attaches the IMU data the optimizer needs (fused attitude at the scan stamp
and the gyro samples since the previous scan), so stage 2 never touches the
IMU stream. Stage 2 dead-reckons, selects keyframes, grows the constraint
mesh and optimizes the window. Retired keyframe poses leave the window as
soon as they are frozen and are written incrementally, so memory does not
grow with the length of the run.
"""

from __future__ import annotations

import errno
import json
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .config import PipelineConfig
from .ego_velocity import EgoVelocity, ModelKind, MotionModel, doppler_rows, estimate_vehicle_velocity
from .errors import RadarOdoError, TooFewPoints
from .evaluation import format_tum
from .geom import ImuBuffer, ImuSample, Pose, Quat, imu_orientation_at, imu_samples_between, iter_imu_csv
from .gicp import build_gicp_cloud
from .pose_graph import Keyframe, WindowState, add_keyframe, imu_yaw_update, keyframe_gate, optimize_window, propagate_pose
from .preprocess import RadarScan, iter_scan_stream, preprocess_scan, voxel_downsample

log = logging.getLogger(__name__)

_DONE = object()


@dataclass(frozen=True, eq=False)
class ScanRecord:
    """Immutable message from stage 1 to stage 2."""

    t_stamp: float
    cloud: np.ndarray
    velocity: EgoVelocity | None
    attitude: Quat
    gyro: tuple[ImuSample, ...]
    fit_rms: float = float("nan")
    status: str = "ok"


@dataclass
class RunSummary:
    n_scans: int = 0
    n_keyframes: int = 0
    velocity_failures: int = 0
    residual_warnings: int = 0
    degenerate_keyframes: int = 0
    solver_diverged: int = 0
    wall_time: float = 0.0
    trajectory: list[Pose] = field(default_factory=list)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


class CloudStage:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.ext = cfg.extrinsics.to_extrinsics()
        self.kind = ModelKind(cfg.run.model)
        self.R_sb = self.ext.T_radar_to_base.rot.matrix()
        self.warnings = 0

    def records(self, scans: Iterable[RadarScan], imu: Iterable[ImuSample]) -> Iterator[ScanRecord]:
        buf = imu if isinstance(imu, ImuBuffer) else ImuBuffer(imu)
        prev_t: float | None = None
        prev_att: Quat | None = None
        for scan in scans:
            if not buf.ensure(scan.t_stamp):
                log.warning("IMU stream ends before scan at t=%.3f; stopping", scan.t_stamp)
                return
            att = imu_orientation_at(buf, scan.t_stamp)
            gyro = tuple(imu_samples_between(buf, prev_t, scan.t_stamp)) if prev_t is not None else ()
            buf.discard_before(scan.t_stamp)
            yield self.process(scan, att, prev_att if prev_att is not None else att, gyro)
            prev_t, prev_att = scan.t_stamp, att

    def process(self, scan: RadarScan, att: Quat, prev_att: Quat, gyro: tuple[ImuSample, ...]) -> ScanRecord:
        gated = preprocess_scan(scan, self.cfg.preprocess)
        base = self.ext.T_radar_to_base.transform_points(gated.xyz)
        cloud = voxel_downsample(base, self.cfg.preprocess.voxel_leaf)
        cloud.setflags(write=False)
        model = MotionModel.from_orientations(self.kind, prev_att, att)
        vel, status, rms = None, "ok", float("nan")
        try:
            vel, _ = estimate_vehicle_velocity(gated, model, self.cfg.ransac, self.R_sb)
            rows, rhs = doppler_rows(gated)
            rows = rows @ self.R_sb.T
            rms = float(np.sqrt(np.mean((rows @ -vel.v - rhs) ** 2)))
            if rms > self.cfg.ransac.threshold:
                status = "elevated_residual"
        except RadarOdoError as exc:
            status = f"velocity_failed: {exc}"
        if status != "ok":
            self.warnings += 1
            if self.warnings <= 5:
                log.warning("t=%.3f: %s (Doppler residual rms %.3f m/s)", scan.t_stamp, status, rms)
        return ScanRecord(scan.t_stamp, cloud, vel, att, gyro, rms, status)


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


class OptimizerStage:
    """Dead reckoning, keyframing and sliding-window optimization.

    ``emit`` receives ``("est", Pose)``, ``("raw", Pose)`` and
    ``("diag", dict)`` events in data order.
    """

    def __init__(self, cfg: PipelineConfig, emit: Callable[[str, object], None], executor=None):
        self.cfg = cfg
        self.emit = emit
        self.executor = executor
        self.win = WindowState(n=cfg.odom.window)
        self.summary = RunSummary()
        self.next_id = 0
        self.last_v = np.zeros(3)
        self.prev: ScanRecord | None = None
        self.att: Quat | None = None
        self.raw: Pose | None = None
        self.est: Pose | None = None

    def push(self, rec: ScanRecord) -> None:
        self.summary.n_scans += 1
        if rec.velocity is not None:
            self.last_v = np.array(rec.velocity.v)
        else:
            self.summary.velocity_failures += 1
        if rec.status == "elevated_residual":
            self.summary.residual_warnings += 1
        if self.prev is None:
            self.att = rec.attitude
            self.raw = Pose(rec.t_stamp, np.zeros(3), rec.attitude)
            self.est = self.raw
            self.emit("raw", self.raw)
            self._keyframe(rec)
            self.prev = rec
            return
        dt = rec.t_stamp - self.prev.t_stamp
        att = imu_yaw_update(self.att, rec.gyro) if rec.gyro else rec.attitude
        self.raw = propagate_pose(self.raw, self.last_v, self.att, att, dt, rec.t_stamp)
        self.est = propagate_pose(self.est, self.last_v, self.att, att, dt, rec.t_stamp)
        self.att = att
        self.emit("raw", self.raw)
        last_kf = self.win.keyframes[-1].pose
        if keyframe_gate(self.est, last_kf, self.cfg.odom.trans_threshold, self.cfg.odom.rot_threshold_deg):
            self._keyframe(rec)
        self.prev = rec

    def _keyframe(self, rec: ScanRecord) -> None:
        try:
            cloud = build_gicp_cloud(rec.cloud, self.cfg.gicp.k_neighbors, self.cfg.gicp.eps_cov)
        except TooFewPoints:
            cloud = None
        kf = Keyframe(self.next_id, self.est, cloud, self.raw, rec.attitude)
        self.next_id += 1
        rep = add_keyframe(self.win, kf, self.cfg.gicp, self.executor)
        solve = optimize_window(self.win, self.cfg.odom)
        self.summary.n_keyframes += 1
        self.summary.degenerate_keyframes += int(rep.degenerate)
        self.summary.solver_diverged += int(solve.termination == "diverged")
        self.est = kf.pose
        while self.win.retired:
            self.emit("est", self.win.retired.pop(0))
        self.emit(
            "diag",
            {
                "keyframe": kf.id,
                "t": kf.t_stamp,
                "edges": [
                    {"from": e.from_id, "to": e.to_id, "fitness": e.fitness, "w_gicp": e.w_gicp}
                    for e in self.win.edges.values()
                ],
                "odom_links": sorted(list(k) for k in self.win.odom_links),
                "added": [e.from_id for e in rep.edges_added],
                "discarded": [{"from": i, "fitness": f} for i, f in rep.discarded],
                "failed": [{"from": i, "reason": r} for i, r in rep.failed],
                "degenerate": rep.degenerate,
                "retired": rep.retired_id,
                "velocity_status": rec.status,
                "doppler_rms": rec.fit_rms,
                "solve": {
                    "iterations": solve.iterations,
                    "initial_cost": solve.initial_cost,
                    "final_cost": solve.final_cost,
                    "termination": solve.termination,
                    "cost_history": solve.cost_history,
                    "edges_used": solve.edges_used,
                    "wall_time": solve.wall_time,
                },
            },
        )

    def finish(self) -> None:
        for k in self.win.keyframes:
            self.emit("est", k.pose)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


class _Writer:
    """Streams events to the output files; optionally keeps the estimated trajectory in memory."""

    def __init__(self, out: Path | None, raw: Path | None, diag: Path | None, keep: bool):
        self.fh = {
            "est": open(out, "w") if out else None,
            "raw": open(raw, "w") if raw else None,
            "diag": open(diag, "w") if diag else None,
        }
        self.keep = keep
        self.trajectory: list[Pose] = []

    def __call__(self, kind: str, payload) -> None:
        if kind == "est" and self.keep:
            self.trajectory.append(payload)
        fh = self.fh[kind]
        if fh is None:
            return
        if kind == "diag":
            fh.write(json.dumps(payload) + "\n")
        else:
            fh.write(format_tum(payload) + "\n")

    def close(self) -> None:
        for fh in self.fh.values():
            if fh is not None:
                fh.close()


def _threaded(records: Iterator[ScanRecord], stage: OptimizerStage, writer: _Writer, maxsize: int) -> None:
    q_in: queue.Queue = queue.Queue(maxsize=maxsize)
    q_out: queue.Queue = queue.Queue(maxsize=4 * maxsize)
    stop = threading.Event()
    errors: list[BaseException] = []

    def put(q: queue.Queue, item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for rec in records:
                if not put(q_in, rec):
                    return
        except BaseException as exc:  # handed to the consumer
            errors.append(exc)
        put(q_in, _DONE)

    def write() -> None:
        try:
            while True:
                item = q_out.get()
                if item is _DONE:
                    return
                writer(*item)
        except BaseException as exc:
            errors.append(exc)
            stop.set()

    producer = threading.Thread(target=produce, name="cloud-stage", daemon=True)
    writer_thread = threading.Thread(target=write, name="writer", daemon=True)
    producer.start()
    writer_thread.start()
    stage.emit = lambda kind, payload: put(q_out, (kind, payload))
    try:
        while True:
            rec = q_in.get()
            if rec is _DONE or errors:
                break
            stage.push(rec)
        if not errors:
            stage.finish()
    except BaseException:
        stop.set()
        raise
    finally:
        while writer_thread.is_alive():
            try:
                q_out.put(_DONE, timeout=0.1)
                break
            except queue.Full:
                continue
        writer_thread.join()
        stop.set()
        producer.join()
    if errors:
        raise errors[0]


def run_odometry(
    cfg: PipelineConfig,
    scans: Iterable[RadarScan],
    imu: Iterable[ImuSample],
    out: str | Path | None = None,
    raw_out: str | Path | None = None,
    diagnostics: str | Path | None = None,
    keep_trajectory: bool = True,
    threaded: bool | None = None,
) -> RunSummary:
    """Run both stages over in-memory or streamed inputs and write the requested outputs."""
    t0 = time.perf_counter()
    threaded = cfg.run.threaded if threaded is None else threaded
    writer = _Writer(
        Path(out) if out else None, Path(raw_out) if raw_out else None, Path(diagnostics) if diagnostics else None,
        keep_trajectory,
    )
    executor = ThreadPoolExecutor(cfg.run.gicp_workers) if cfg.run.gicp_workers > 1 else None
    cloud = CloudStage(cfg)
    stage = OptimizerStage(cfg, writer, executor)
    try:
        records = cloud.records(scans, imu)
        if threaded:
            _threaded(records, stage, writer, cfg.run.queue_size)
        else:
            for rec in records:
                stage.push(rec)
            stage.finish()
    finally:
        writer.close()
        if executor is not None:
            executor.shutdown()
    summary = stage.summary
    summary.trajectory = writer.trajectory
    summary.wall_time = time.perf_counter() - t0
    if cloud.warnings > 5:
        log.warning("%d scans had velocity problems or elevated Doppler residuals", cloud.warnings)
    return summary


def run_files(
    cfg: PipelineConfig,
    radar_path: str | Path,
    imu_path: str | Path,
    out: str | Path,
    raw_out: str | Path | None = None,
    diagnostics: str | Path | None = None,
    threaded: bool | None = None,
) -> RunSummary:
    for p in (radar_path, imu_path):
        if not Path(p).is_file():
            raise FileNotFoundError(errno.ENOENT, "no such file", str(p))
    return run_odometry(
        cfg,
        iter_scan_stream(radar_path),
        iter_imu_csv(imu_path),
        out,
        raw_out,
        diagnostics,
        keep_trajectory=False,
        threaded=threaded,
    )
