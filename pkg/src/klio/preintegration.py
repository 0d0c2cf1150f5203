"""IMU state and covariance propagation between two LiDAR timestamps.

Each IMU sample ``k`` moves the state from ``x[k-1]`` to ``x[k]``::

    R' = R Exp(w Δt) Exp(½ α Δt²)
    p' = p + v Δt + ½ g Δt² + ½ R a Δt² + ⅙ j Δt³
    v' = v + g Δt + R a Δt + ½ j Δt²
    b' = b + m Δt

with bias-corrected rates ``w``/``a``, angular acceleration
``α = (w[k] - w[k-1]) / Δt`` and world-frame jerk
``j = (R[k-1] a[k] - R[k-2] a[k-1]) / Δt``. The previous sample and the
rotation it was applied at travel between calls in an :class:`ImuCarry`;
without one, ``α`` and ``j`` are zero.

The error state is 15-dimensional, ordered (rotation, position, velocity,
gyro bias, accel bias), with the rotation perturbed on the right. The noise
vector is ordered (gyro noise, accel noise, gyro bias walk, accel bias walk)
with covariance ``q I``; the bias walk enters scaled by the sample interval,
as in the usual discrete error-state formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import MeasurementGapError, NumericalFailureError, PredictionUnavailableError
from .geometry import Pose, hat, so3_exp, so3_log, so3_right_jacobian

STATE_DIM = 15
NOISE_DIM = 12
ROT, POS, VEL, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))


@dataclass(frozen=True)
class NavState:
    pose: Pose = field(default_factory=Pose)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("velocity", "gyro_bias", "accel_bias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    def boxplus(self, delta) -> NavState:
        delta = np.asarray(delta, dtype=float)
        return replace(
            self,
            pose=self.pose.boxplus(delta[:6]),
            velocity=self.velocity + delta[VEL],
            gyro_bias=self.gyro_bias + delta[BG],
            accel_bias=self.accel_bias + delta[BA],
        )

    def boxminus(self, other: NavState) -> np.ndarray:
        return np.concatenate(
            [
                self.pose.boxminus(other.pose),
                self.velocity - other.velocity,
                self.gyro_bias - other.gyro_bias,
                self.accel_bias - other.accel_bias,
            ]
        )

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (
                self.pose.rotation,
                self.pose.translation,
                self.velocity,
                self.gyro_bias,
                self.accel_bias,
            )
        )


@dataclass(frozen=True)
class NoiseParams:
    q: float = 1.0
    gravity: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))
    max_gap: float = 0.5

    def __post_init__(self):
        if not self.q > 0:
            raise ValueError(f"process noise scale q must be positive, got {self.q}")
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))


class ImuCarry(NamedTuple):
    """Previous IMU sample and the rotation it was integrated at."""

    sample: ImuSample
    rotation: np.ndarray


@dataclass
class PreintegrationTrajectory:
    """States ``x[0] .. x[K]`` of one batch plus the body rates around them.

    ``rates[k]`` is the bias-corrected angular velocity used to extrapolate
    the rotation of state ``k`` over short time offsets.
    """

    timestamps: np.ndarray
    states: list[NavState]
    rates: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> NavState:
        return self.states[-1]


def _step(state: NavState, sample: ImuSample, carry: ImuCarry | None, gravity: np.ndarray,
          noise: np.ndarray | None = None) -> tuple[NavState, float]:
    dt = sample.timestamp - state.timestamp
    n = np.zeros(NOISE_DIM) if noise is None else noise
    r = state.rotation
    w = sample.gyro - state.gyro_bias - n[0:3]
    a = sample.accel - state.accel_bias - n[3:6]
    acc_w = r @ a
    if carry is None:
        alpha_term = np.zeros(3)
        jerk = np.zeros(3)
    else:
        w_prev = carry.sample.gyro - state.gyro_bias
        a_prev = carry.sample.accel - state.accel_bias
        alpha_term = 0.5 * (w - w_prev) * dt  # ½ α Δt²
        jerk = (acc_w - carry.rotation @ a_prev) / dt
    r_new = r @ so3_exp(w * dt) @ so3_exp(alpha_term)
    p_new = (
        state.position
        + state.velocity * dt
        + 0.5 * gravity * dt**2
        + 0.5 * acc_w * dt**2
        + jerk * dt**3 / 6.0
    )
    v_new = state.velocity + gravity * dt + acc_w * dt + 0.5 * jerk * dt**2
    return (
        NavState(
            pose=Pose(r_new, p_new),
            velocity=v_new,
            gyro_bias=state.gyro_bias + n[6:9] * dt,
            accel_bias=state.accel_bias + n[9:12] * dt,
            timestamp=sample.timestamp,
        ),
        dt,
    )


def _check_dt(prev: NavState, sample: ImuSample, noise: NoiseParams) -> None:
    dt = sample.timestamp - prev.timestamp
    if not dt > 0.0:
        raise MeasurementGapError(
            f"IMU timestamp {sample.timestamp!r} does not follow state time {prev.timestamp!r}"
        )
    if dt > noise.max_gap:
        raise MeasurementGapError(f"IMU gap of {dt:.3f} s exceeds {noise.max_gap} s")


def propagate_step(prev: NavState, sample: ImuSample, noise: NoiseParams,
                   carry: ImuCarry | None = None) -> NavState:
    """Noise-free transition of ``prev`` through one IMU sample."""
    _check_dt(prev, sample, noise)
    return _step(prev, sample, carry, noise.gravity)[0]


def propagate_with_noise(prev: NavState, sample: ImuSample, gravity, noise_vector,
                         carry: ImuCarry | None = None) -> NavState:
    """Transition with an explicit 12-vector of noise, for linearisation checks."""
    return _step(prev, sample, carry, np.asarray(gravity, float), np.asarray(noise_vector, float))[0]


def step_jacobians(prev: NavState, sample: ImuSample,
                   carry: ImuCarry | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(F_x, F_w)`` of the transition, evaluated at zero noise.

    ``carry`` is held fixed: the previous sample is treated as noise-free and
    the rotation it was applied at is not part of the error state.
    """
    dt = sample.timestamp - prev.timestamp
    r = prev.rotation
    w = sample.gyro - prev.gyro_bias
    a = sample.accel - prev.accel_bias
    e1 = so3_exp(w * dt)
    jr1 = so3_right_jacobian(w * dt)
    if carry is None:
        theta2 = np.zeros(3)
        cp, cv = 0.5, 1.0
        r_prev = None
    else:
        theta2 = 0.5 * (w - (carry.sample.gyro - prev.gyro_bias)) * dt
        cp, cv = 2.0 / 3.0, 1.5
        r_prev = carry.rotation
    e2 = so3_exp(theta2)
    jr2 = so3_right_jacobian(theta2)
    r_ra = r @ hat(a)
    eye = np.eye(3)

    fx = np.eye(STATE_DIM)
    fx[ROT, ROT] = (e1 @ e2).T
    # both rates shift with the gyro bias, so α does not depend on it
    fx[ROT, BG] = -e2.T @ jr1 * dt
    fx[POS, ROT] = -cp * r_ra * dt**2
    fx[POS, VEL] = eye * dt
    fx[VEL, ROT] = -cv * r_ra * dt
    fx[POS, BA] = -cp * r * dt**2
    fx[VEL, BA] = -cv * r * dt
    if r_prev is not None:
        fx[POS, BA] += r_prev * dt**2 / 6.0
        fx[VEL, BA] += 0.5 * r_prev * dt

    fw = np.zeros((STATE_DIM, NOISE_DIM))
    fw[ROT, 0:3] = -e2.T @ jr1 * dt
    if carry is not None:
        fw[ROT, 0:3] -= 0.5 * jr2 * dt
    fw[POS, 3:6] = -cp * r * dt**2
    fw[VEL, 3:6] = -cv * r * dt
    fw[BG, 6:9] = eye * dt
    fw[BA, 9:12] = eye * dt
    return fx, fw


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def propagate_covariance_step(cov: np.ndarray, fx: np.ndarray, fw: np.ndarray,
                              noise: NoiseParams) -> np.ndarray:
    out = fx @ cov @ fx.T + noise.q * (fw @ fw.T)
    if not np.all(np.isfinite(out)):
        raise NumericalFailureError(
            "covariance propagation produced non-finite values "
            f"(non-finite entries: cov {np.count_nonzero(~np.isfinite(cov))}, "
            f"F_x {np.count_nonzero(~np.isfinite(fx))}, F_w {np.count_nonzero(~np.isfinite(fw))})"
        )
    return symmetrize(out)


def preintegrate_batch(start: NavState, start_cov: np.ndarray, batch: Sequence[ImuSample],
                       noise: NoiseParams, carry: ImuCarry | None = None,
                       ) -> tuple[PreintegrationTrajectory, np.ndarray, ImuCarry]:
    """Propagate ``start`` through ``batch``.

    Returns the ``K + 1`` state trajectory, the predicted covariance and the
    carry to hand to the next batch.
    """
    if len(batch) == 0:
        raise PredictionUnavailableError("empty IMU batch")
    states = [start]
    rates = []
    first_rate_sample = carry.sample if carry is not None else batch[0]
    rates.append(first_rate_sample.gyro - start.gyro_bias)
    cov = np.asarray(start_cov, dtype=float)
    state = start
    for sample in batch:
        _check_dt(state, sample, noise)
        fx, fw = step_jacobians(state, sample, carry)
        nxt, _ = _step(state, sample, carry, noise.gravity)
        cov = propagate_covariance_step(cov, fx, fw, noise)
        carry = ImuCarry(sample, state.rotation)
        rates.append(sample.gyro - state.gyro_bias)
        state = nxt
        states.append(state)
    traj = PreintegrationTrajectory(
        timestamps=np.array([s.timestamp for s in states]),
        states=states,
        rates=np.array(rates),
    )
    return traj, cov, carry


def gravity_aligned_rotation(accels: np.ndarray, gravity=DEFAULT_GRAVITY) -> np.ndarray:
    """Roll/pitch rotation aligning the mean specific force with ``-gravity``.

    Yaw is left at zero.
    """
    f = np.mean(np.asarray(accels, dtype=float), axis=0)
    up_body = f / np.linalg.norm(f)
    g = np.asarray(gravity, dtype=float)
    up_world = -g / np.linalg.norm(g)
    # rotation taking the body "up" to the world "up" with no twist about it
    axis = np.cross(up_body, up_world)
    s = np.linalg.norm(axis)
    c = float(up_body @ up_world)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return so3_exp(np.array([np.pi, 0.0, 0.0]))
    r = so3_exp(axis / s * np.arctan2(s, c))
    # remove the yaw component introduced by the shortest-arc rotation
    yaw = np.arctan2(r[1, 0], r[0, 0])
    rz = so3_exp(np.array([0.0, 0.0, -yaw]))
    return rz @ r


def rotation_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(so3_log(a.T @ b)))
