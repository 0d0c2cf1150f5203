"""Full-state measurement construction and the Kalman update.

The observation model is the identity on the 15-dimensional error state, so
the gain is ``K = Σ̂ (R + Σ̂)⁻¹``. Blocks missing from a measurement are
handled by inflating their noise rather than shrinking the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import NumericalFailureError
from .geometry import Pose, so3_log
from .preintegration import BA, BG, STATE_DIM, VEL, ImuSample, NavState, symmetrize
from .registration import MatchResult

MASKED_VARIANCE = 1e12
HESSIAN_FLOOR = 1e-6
GYRO_BIAS_CLAMP = 0.5
ACCEL_BIAS_CLAMP = 2.0

# valid_mask order
POSE, VELOCITY, GYRO_BIAS, ACCEL_BIAS = range(4)
_BLOCKS = (slice(0, 6), VEL, BG, BA)


@dataclass(frozen=True)
class MeasurementNoise:
    sigma_p_sq: float = 100.0
    sigma_v_sq: float = 0.1
    sigma_omega_sq: float = 0.1
    sigma_a_sq: float = 0.1

    def __post_init__(self):
        for name in ("sigma_p_sq", "sigma_v_sq", "sigma_omega_sq", "sigma_a_sq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Measurement:
    pose: Pose
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    valid_mask: tuple[bool, bool, bool, bool] = (True, True, True, True)

    def as_state(self, timestamp: float = 0.0) -> NavState:
        return NavState(self.pose, self.velocity, self.gyro_bias, self.accel_bias, timestamp)


def build_measurement(curr: MatchResult | Pose, prev: MatchResult | Pose | None,
                      imu_batch: Sequence[ImuSample], gravity, dt: float,
                      prev_velocity: np.ndarray | None = None) -> Measurement:
    """Derive velocity and bias observations from two consecutive matches.

    ``prev_velocity`` is the velocity observation built for the previous
    frame; without it the accelerometer-bias block is masked. Without
    ``prev`` only the pose is observed.
    """
    if not dt > 0:
        raise ValueError(f"measurement interval must be positive, got {dt}")
    curr_pose = curr.pose if isinstance(curr, MatchResult) else curr
    if prev is None:
        return Measurement(curr_pose, valid_mask=(True, False, False, False))
    prev_pose = prev.pose if isinstance(prev, MatchResult) else prev
    velocity = (curr_pose.translation - prev_pose.translation) / dt
    if len(imu_batch) == 0:
        return Measurement(curr_pose, velocity, valid_mask=(True, True, False, False))
    gyro_mean = np.mean([s.gyro for s in imu_batch], axis=0)
    accel_mean = np.mean([s.accel for s in imu_batch], axis=0)
    rate = so3_log(prev_pose.rotation.T @ curr_pose.rotation) / dt
    gyro_bias = gyro_mean - rate
    if prev_velocity is None:
        return Measurement(curr_pose, velocity, gyro_bias, valid_mask=(True, True, True, False))
    g = np.asarray(gravity, dtype=float)
    specific = prev_pose.rotation.T @ (velocity - prev_velocity - g * dt) / dt
    return Measurement(curr_pose, velocity, gyro_bias, accel_mean - specific)


def floored_inverse(h: np.ndarray, floor: float = HESSIAN_FLOOR) -> np.ndarray:
    """Inverse of a symmetric PSD matrix with eigenvalues floored at ``floor * max``."""
    vals, vecs = np.linalg.eigh(0.5 * (h + h.T))
    top = max(vals.max(), np.finfo(float).tiny)
    vals = np.maximum(vals, floor * top)
    return (vecs / vals) @ vecs.T


def build_measurement_noise(hessian: np.ndarray, noise: MeasurementNoise) -> np.ndarray:
    r = np.zeros((STATE_DIM, STATE_DIM))
    r[:6, :6] = noise.sigma_p_sq * floored_inverse(hessian)
    r[VEL, VEL] = noise.sigma_v_sq * np.eye(3)
    r[BG, BG] = noise.sigma_omega_sq * np.eye(3)
    r[BA, BA] = noise.sigma_a_sq * np.eye(3)
    return symmetrize(r)


def mask_noise(r: np.ndarray, valid_mask) -> np.ndarray:
    r = r.copy()
    for present, block in zip(valid_mask, _BLOCKS):
        if not present:
            r[block, :] = 0.0
            r[:, block] = 0.0
            r[block, block] = MASKED_VARIANCE * np.eye(block.stop - block.start)
    return r


def innovation(z: Measurement, pred: NavState) -> np.ndarray:
    """``z ⊟ x̂`` with bias blocks clamped against scan-matching outliers."""
    y = z.as_state().boxminus(pred)
    for present, block in zip(z.valid_mask, _BLOCKS):
        if not present:
            y[block] = 0.0
    y[BG] = np.clip(y[BG], -GYRO_BIAS_CLAMP, GYRO_BIAS_CLAMP)
    y[BA] = np.clip(y[BA], -ACCEL_BIAS_CLAMP, ACCEL_BIAS_CLAMP)
    return y


def kalman_update(pred: NavState, pred_cov: np.ndarray, z: Measurement, r: np.ndarray
                  ) -> tuple[NavState, np.ndarray]:
    """``x = x̂ ⊞ K (z ⊟ x̂)``, ``Σ = (I - K) Σ̂``.

    Uses ``I - K = R S⁻¹`` with ``S = R + Σ̂`` so a zero ``R`` gives an exact
    identity gain.
    """
    r = mask_noise(np.asarray(r, dtype=float), z.valid_mask)
    s = r + pred_cov
    try:
        a = np.linalg.solve(s, r)  # S⁻¹ R, so R S⁻¹ = a.T
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(
            f"innovation covariance is singular (cond={np.linalg.cond(s):.3e})"
        ) from exc
    if not np.all(np.isfinite(a)):
        raise NumericalFailureError(f"innovation covariance ill-conditioned (cond={np.linalg.cond(s):.3e})")
    i_minus_k = a.T
    gain = np.eye(STATE_DIM) - i_minus_k
    correction = gain @ innovation(z, pred)
    cov = symmetrize(i_minus_k @ pred_cov)
    return pred.boxplus(correction), cov


def inflate_prediction(state: NavState, cov: np.ndarray, q: float, dt: float,
                       timestamp: float) -> tuple[NavState, np.ndarray]:
    """Constant-pose prediction used when no IMU data covers the interval."""
    return replace(state, timestamp=timestamp), cov + q * dt * np.eye(STATE_DIM)
