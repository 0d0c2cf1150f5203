"""Scan-by-scan odometry driver.

IMU samples go into a bounded ring buffer through :meth:`Odometry.push_imu`.
Each :meth:`Odometry.process_scan` call then runs prediction, deskewing,
registration, the filter update and keyframe maintenance for one sweep.
Everything runs on the caller's thread; feeding both entry points from one
timestamp-sorted replay loop (see :func:`replay`) makes runs reproducible.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .config import KlioConfig
from .ekf import (
    VELOCITY,
    build_measurement,
    build_measurement_noise,
    inflate_prediction,
    kalman_update,
)
from .errors import KlioError, MeasurementGapError, NumericalFailureError, RegistrationError
from .geometry import Pose
from .mapping import KeyframeSet, build_local_map, should_insert_keyframe
from .pointcloud import MapCloud, ScanCloud, estimate_point_covariances, voxel_downsample
from .preintegration import (
    ImuCarry,
    ImuSample,
    NavState,
    PreintegrationTrajectory,
    gravity_aligned_rotation,
    preintegrate_batch,
)
from .registration import Extrinsics, MatchResult, deskew, gicp_align

log = logging.getLogger(__name__)

OK = "ok"
BOOTSTRAP = "bootstrap"
REGISTRATION_FAILED = "registration_failed"
DEGENERATE_SCAN = "degenerate_scan"

# extra IMU history integrated before the first sweep [s]
BOOTSTRAP_MARGIN = 0.05


class ImuBuffer:
    """Bounded FIFO of IMU samples with non-decreasing timestamps.

    Safe for one producer thread pushing while the scan thread pops.
    """

    def __init__(self, capacity: int = 4000):
        if capacity < 1:
            raise ValueError("IMU buffer capacity must be at least 1")
        self._samples: deque[ImuSample] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self.capacity = capacity
        self.overflow_dropped = 0
        self.out_of_order_dropped = 0

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self):
        with self._lock:
            return iter(list(self._samples))

    def push(self, sample: ImuSample) -> None:
        with self._lock:
            self._push(sample)

    def _push(self, sample: ImuSample) -> None:
        if self._samples and sample.timestamp < self._samples[-1].timestamp:
            self.out_of_order_dropped += 1
            return
        if len(self._samples) == self.capacity:
            self.overflow_dropped += 1
            if self.overflow_dropped == 1 or self.overflow_dropped % 1000 == 0:
                log.warning("IMU buffer full, %d samples dropped so far", self.overflow_dropped)
        self._samples.append(sample)

    def pop_until(self, t: float) -> list[ImuSample]:
        """Remove and return every sample with timestamp <= ``t``."""
        out = []
        with self._lock:
            while self._samples and self._samples[0].timestamp <= t:
                out.append(self._samples.popleft())
        return out

    def peek_until(self, t: float) -> list[ImuSample]:
        with self._lock:
            return [s for s in self._samples if s.timestamp <= t]


@dataclass
class OdometryRecord:
    timestamp: float
    state: NavState
    cov_diag: np.ndarray
    correspondence_rate: float = float("nan")
    iterations: int = 0
    converged: bool = False
    keyframe_inserted: bool = False
    status: str = OK
    num_points: int = 0


@dataclass
class Snapshot:
    state: NavState
    covariance: np.ndarray
    local_map: MapCloud | None
    num_keyframes: int


@dataclass
class _Frame:
    """What the next scan needs from the previous one."""

    match_pose: Pose | None = None
    velocity: np.ndarray | None = None
    carry: ImuCarry | None = None


def _reanchor(traj: PreintegrationTrajectory, end_pose: Pose) -> PreintegrationTrajectory:
    """Rigidly move a trajectory so its last state sits at ``end_pose``."""
    fix = end_pose @ traj.final.pose.inverse()
    states = [
        replace(s, pose=fix @ s.pose, velocity=np.zeros(3)) for s in traj.states
    ]
    return PreintegrationTrajectory(traj.timestamps.copy(), states, traj.rates.copy())


class Odometry:
    def __init__(self, config: KlioConfig | None = None):
        self.config = config or KlioConfig()
        self.noise = self.config.noise_params
        self.meas_noise = self.config.measurement_noise
        self.extrinsics = Extrinsics(self.config.extrinsics_pose)
        self.imu = ImuBuffer(self.config.imu_buffer_capacity)
        self.keyframes = KeyframeSet()
        self.local_map: MapCloud | None = None
        self.state: NavState | None = None
        self.cov: np.ndarray | None = None
        self.records: list[OdometryRecord] = []
        self._frame = _Frame()
        self._first_imu_time: float | None = None

    # ingest ---------------------------------------------------------------

    def push_imu(self, sample: ImuSample) -> None:
        if self._first_imu_time is None:
            self._first_imu_time = sample.timestamp
        self.imu.push(sample)

    def process_scan(self, cloud: ScanCloud) -> OdometryRecord:
        if self.state is None:
            record = self._bootstrap(cloud)
        else:
            record = self._track(cloud)
        self.records.append(record)
        return record

    def snapshot(self) -> Snapshot:
        return Snapshot(self.state, None if self.cov is None else self.cov.copy(),
                        self.local_map, len(self.keyframes))

    def finalize(self) -> list[OdometryRecord]:
        return list(self.records)

    # internals ------------------------------------------------------------

    def _record(self, status: str, match: MatchResult | None = None, inserted: bool = False,
                num_points: int = 0) -> OdometryRecord:
        return OdometryRecord(
            timestamp=self.state.timestamp,
            state=self.state,
            cov_diag=np.diag(self.cov).copy(),
            correspondence_rate=match.correspondence_rate if match else float("nan"),
            iterations=match.iterations if match else 0,
            converged=match.converged if match else False,
            keyframe_inserted=inserted,
            status=status,
            num_points=num_points,
        )

    def _initial_rotation(self, t: float) -> np.ndarray:
        if self._first_imu_time is None:
            return np.eye(3)
        window_end = min(t, self._first_imu_time + self.config.init_duration)
        accels = [s.accel for s in self.imu.peek_until(window_end)]
        if not accels:
            return np.eye(3)
        return gravity_aligned_rotation(np.array(accels), self.config.gravity)

    def _bootstrap(self, cloud: ScanCloud) -> OdometryRecord:
        t = cloud.timestamp
        pose = Pose(self._initial_rotation(t), np.zeros(3))
        self.state = NavState(pose, timestamp=t)
        self.cov = self.config.sigma0 * np.eye(15)
        samples = self.imu.pop_until(t)
        sweep = float(cloud.time_offsets.max()) if len(cloud) else 0.0
        in_sweep = [s for s in samples if s.timestamp >= t - sweep - BOOTSTRAP_MARGIN]
        traj = None
        if len(in_sweep) >= 2:
            # gyro-only backward motion model: assume no translation at start-up
            start = NavState(pose, timestamp=in_sweep[0].timestamp)
            try:
                traj, _, _ = preintegrate_batch(start, self.cov, in_sweep[1:], self.noise)
                traj = _reanchor(traj, pose)
            except KlioError as exc:
                log.warning("bootstrap deskew skipped: %s", exc)
                traj = None
        if samples:
            self._frame.carry = ImuCarry(samples[-1], pose.rotation)
        body = voxel_downsample(deskew(cloud, traj, pose, self.extrinsics),
                                self.config.voxel_resolution)
        self.keyframes.add(pose, body)
        self._rebuild_map(pose.translation)
        self._frame.match_pose = pose
        return self._record(BOOTSTRAP, inserted=True, num_points=len(body))

    def _predict(self, t: float, batch: list[ImuSample]
                 ) -> tuple[NavState, np.ndarray, PreintegrationTrajectory | None]:
        prev = self.state
        dt = t - prev.timestamp
        if batch:
            if batch[-1].timestamp < t:
                last = batch[-1]
                batch = batch + [ImuSample(t, last.gyro, last.accel)]
            try:
                traj, cov, carry = preintegrate_batch(prev, self.cov, batch, self.noise,
                                                      self._frame.carry)
                self._frame.carry = carry
                return replace(traj.final, timestamp=t), cov, traj
            except MeasurementGapError as exc:
                log.warning("IMU gap at t=%.3f (%s); using constant-pose prediction", t, exc)
        self._frame.carry = None
        state, cov = inflate_prediction(prev, self.cov, self.config.q, dt, t)
        return state, cov, None

    def _track(self, cloud: ScanCloud) -> OdometryRecord:
        t = cloud.timestamp
        prev_t = self.state.timestamp
        if not t > prev_t:
            raise KlioError(f"scan timestamp {t} does not follow {prev_t}")
        batch = [s for s in self.imu.pop_until(t) if s.timestamp > prev_t]
        pred, pred_cov, traj = self._predict(t, batch)

        body = voxel_downsample(deskew(cloud, traj, pred.pose, self.extrinsics),
                                self.config.voxel_resolution)
        if len(body) < max(self.config.min_scan_points, self.config.k_neighbors):
            return self._coast(pred, pred_cov, DEGENERATE_SCAN, len(body))
        try:
            covs = estimate_point_covariances(body.points, self.config.k_neighbors)
            match = gicp_align(body, self.local_map, pred.pose, self.config.gate,
                               self.config.max_iterations, source_covariances=covs)
            z = build_measurement(match, self._frame.match_pose, batch, self.config.gravity,
                                  t - prev_t, self._frame.velocity)
            r = build_measurement_noise(match.hessian, self.meas_noise)
            state, cov = kalman_update(pred, pred_cov, z, r)
        except (RegistrationError, NumericalFailureError) as exc:
            log.warning("scan at t=%.3f not registered: %s", t, exc)
            return self._coast(pred, pred_cov, REGISTRATION_FAILED, len(body))

        self._reanchor_carry(pred, state)
        self.state, self.cov = replace(state, timestamp=t), cov
        self._frame.match_pose = match.pose
        self._frame.velocity = z.velocity if z.valid_mask[VELOCITY] else None

        inserted = should_insert_keyframe(match.correspondence_rate, self.config.gamma_th,
                                          self.keyframes)
        if inserted:
            self.keyframes.add(self.state.pose, body)
            self._rebuild_map(match.pose.translation)
        return self._record(OK, match, inserted, len(body))

    def _coast(self, pred: NavState, pred_cov: np.ndarray, status: str, n: int) -> OdometryRecord:
        self.state, self.cov = pred, pred_cov
        self._frame.match_pose = None
        self._frame.velocity = None
        return self._record(status, num_points=n)

    def _reanchor_carry(self, pred: NavState, post: NavState) -> None:
        carry = self._frame.carry
        if carry is None:
            return
        rel = pred.rotation.T @ carry.rotation
        self._frame.carry = ImuCarry(carry.sample, post.rotation @ rel)

    def _rebuild_map(self, center) -> None:
        self.local_map, _ = build_local_map(self.keyframes, center, self.config.num_keyframes,
                                            self.config.voxel_resolution, self.config.k_neighbors)


def create(config: KlioConfig | None = None) -> Odometry:
    return Odometry(config)


def replay(odometry: Odometry, imu: Iterable[ImuSample], scans: Iterable[ScanCloud]
           ) -> list[OdometryRecord]:
    """Feed IMU samples and scans in timestamp order.

    At equal timestamps the IMU sample goes first so that the scan sees it.
    Scans may be an iterator; they are consumed lazily.
    """
    imu = list(imu)
    i = 0
    for scan in scans:
        while i < len(imu) and imu[i].timestamp <= scan.timestamp:
            odometry.push_imu(imu[i])
            i += 1
        odometry.process_scan(scan)
    for sample in imu[i:]:
        odometry.push_imu(sample)
    return odometry.finalize()
