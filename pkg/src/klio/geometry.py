"""SO(3)/SE(3) primitives.

Rotations are plain 3x3 ``numpy`` arrays. Tangent vectors of a pose are
6-vectors ordered ``(rotation, translation)``. Increments are applied on the
right for rotation and additively (world frame) for translation, so the two
blocks stay decoupled::

    T ⊞ δ = (R · Exp(δ[:3]), t + δ[3:])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-7
# below this distance from pi the axis is read from the symmetric part
NEAR_PI = 1e-2


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def hat_batch(v: np.ndarray) -> np.ndarray:
    """``hat`` over an ``(N, 3)`` array, returning ``(N, 3, 3)``."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(v) -> np.ndarray:
    """Rodrigues' formula with a second-order Taylor fallback near zero."""
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"so3_exp expects a finite 3-vector, got {v!r}")
    theta = np.linalg.norm(v)
    k = hat(v)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def so3_exp_batch(v: np.ndarray) -> np.ndarray:
    """Vectorised ``so3_exp`` for an ``(N, 3)`` array."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    k = hat_batch(v)
    kk = k @ k
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * kk


def so3_log(r: np.ndarray) -> np.ndarray:
    """Principal axis-angle vector of a rotation matrix, norm in ``[0, pi]``."""
    r = np.asarray(r, dtype=float)
    w = vee(r - r.T)  # = 2 sin(theta) * axis
    s = 0.5 * np.linalg.norm(w)
    c = 0.5 * (np.trace(r) - 1.0)
    theta = np.arctan2(s, c)
    if theta < SMALL_ANGLE:
        return 0.5 * w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > NEAR_PI:
        return theta / (2.0 * np.sin(theta)) * w
    # near pi: n n^T = (R + R^T - 2 cos(theta) I) / (2 (1 - cos(theta)))
    nnt = (r + r.T - 2.0 * c * np.eye(3)) / (2.0 * (1.0 - c))
    i = int(np.argmax(np.diag(nnt)))
    axis = nnt[:, i] / np.sqrt(nnt[i, i])
    axis /= np.linalg.norm(axis)
    d = axis @ w
    if d < 0.0 or (d == 0.0 and axis[np.argmax(np.abs(axis))] < 0.0):
        axis = -axis
    return theta * axis


def so3_right_jacobian(v: np.ndarray) -> np.ndarray:
    """``Exp(v + d) ≈ Exp(v) Exp(Jr(v) d)`` for small ``d``."""
    theta = np.linalg.norm(v)
    k = hat(v)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / t2 * k
        + (theta - np.sin(theta)) / (t2 * theta) * (k @ k)
    )


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r)
    return (
        r.shape == (3, 3)
        and bool(np.all(np.isfinite(r)))
        and np.abs(r.T @ r - np.eye(3)).max() < tol
        and abs(np.linalg.det(r) - 1.0) < tol
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping points from a body frame into a parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    @classmethod
    def from_vector(cls, xi) -> Pose:
        """Pose ``Identity ⊞ xi``."""
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), xi[3:].copy())

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to a single 3-vector or an ``(N, 3)`` array."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def boxplus(self, delta) -> Pose:
        delta = np.asarray(delta, dtype=float)
        return Pose(self.rotation @ so3_exp(delta[:3]), self.translation + delta[3:6])

    def boxminus(self, other: Pose) -> np.ndarray:
        """Tangent ``d`` with ``other.boxplus(d) == self``."""
        return np.concatenate(
            [
                so3_log(other.rotation.T @ self.rotation),
                self.translation - other.translation,
            ]
        )

    def is_valid(self, tol: float = 1e-9) -> bool:
        return is_rotation(self.rotation, tol) and bool(np.all(np.isfinite(self.translation)))


def transform_point(pose: Pose, p) -> np.ndarray:
    return pose.rotation @ np.asarray(p, dtype=float) + pose.translation


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix in radians."""
    return float(np.linalg.norm(so3_log(r)))
