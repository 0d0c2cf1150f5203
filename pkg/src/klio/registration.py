"""Motion compensation and GICP scan-to-map registration.

Pose increments follow the geometry convention: rotation perturbed on the
right, translation additive in the world frame, tangent ordered
``(rotation, translation)``. The 6x6 Hessian returned by :func:`gicp_align`
is expressed in that tangent, which is also the pose block of the filter's
error state.

Point loops are vectorised with numpy on a single thread, so results are
bitwise reproducible run to run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailureError, RegistrationError
from .geometry import Pose, hat_batch, so3_exp_batch
from .pointcloud import DEFAULT_K_NEIGHBORS, MapCloud, ScanCloud, estimate_point_covariances
from .preintegration import PreintegrationTrajectory

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 10
DEFAULT_GATE = 0.5
DEFAULT_MAX_ITERS = 30
INCREMENT_TOL = 1e-6
RELATIVE_COST_TOL = 1e-9
MAX_HALVINGS = 8


@dataclass(frozen=True)
class Extrinsics:
    """Pose of the LiDAR frame expressed in the IMU frame."""

    T_imu_lidar: Pose = field(default_factory=Pose)


@dataclass
class MatchResult:
    pose: Pose
    hessian: np.ndarray
    correspondence_rate: float
    iterations: int
    converged: bool
    final_cost: float
    num_correspondences: int = 0
    # (cost before, cost after) for every accepted step, on that step's pairs
    cost_history: list[tuple[float, float]] = field(default_factory=list)


def interpolate_poses(traj: PreintegrationTrajectory, times: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Body poses at ``times`` as ``(N, 3, 3)`` rotations and ``(N, 3)`` positions.

    Each time takes the nearest trajectory state and extrapolates it at
    constant linear and angular velocity over the remaining gap.
    """
    stamps = traj.timestamps
    j = np.searchsorted(stamps, times)
    j = np.clip(j, 1, len(stamps) - 1) if len(stamps) > 1 else np.zeros(len(times), int)
    if len(stamps) > 1:
        left = j - 1
        pick_left = np.abs(times - stamps[left]) <= np.abs(stamps[j] - times)
        k = np.where(pick_left, left, j)
    else:
        k = j
    dt = times - stamps[k]
    rots = np.stack([s.rotation for s in traj.states])
    pos = np.stack([s.position for s in traj.states])
    vel = np.stack([s.velocity for s in traj.states])
    r = rots[k] @ so3_exp_batch(traj.rates[k] * dt[:, None])
    p = pos[k] + vel[k] * dt[:, None]
    return r, p


def deskew(cloud: ScanCloud, traj: PreintegrationTrajectory | None, predicted: Pose,
           extrinsics: Extrinsics | None = None) -> ScanCloud:
    """Express every point in the body frame of ``predicted``.

    Points go LiDAR -> IMU via the extrinsics, then to the world through the
    body pose at their capture time, then back through ``predicted``.
    """
    ext = (extrinsics or Extrinsics()).T_imu_lidar
    body = ext.transform(cloud.points)
    if traj is None or len(traj) == 0:
        log.warning("deskew called without a trajectory; points left uncompensated")
        return cloud.with_points(body)
    if len(cloud) == 0:
        return cloud.with_points(body)
    times = cloud.timestamp - cloud.time_offsets
    r, p = interpolate_poses(traj, times)
    world = np.einsum("nij,nj->ni", r, body) + p
    return cloud.with_points(predicted.inverse().transform(world))


def _linearize(pose: Pose, src: np.ndarray, dst: np.ndarray, cov_src: np.ndarray,
               cov_dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Cost, ``J^T W J``, ``J^T W d`` and per-pair weights at ``pose``."""
    r = pose.rotation
    d = dst - (src @ r.T + pose.translation)
    weights = _weights(r, cov_src, cov_dst)
    wd = (weights @ d[:, :, None])[:, :, 0]
    cost = float(np.sum(d * wd))
    # d(residual)/d(rotation) = R [p]x, d(residual)/d(translation) = -I
    jr = r @ hat_batch(src)
    jrt = np.swapaxes(jr, 1, 2)
    jrt_w = jrt @ weights
    h = np.empty((6, 6))
    h[:3, :3] = (jrt_w @ jr).sum(axis=0)
    h[:3, 3:] = -jrt_w.sum(axis=0)
    h[3:, :3] = h[:3, 3:].T
    h[3:, 3:] = weights.sum(axis=0)
    b = np.concatenate([(jrt @ wd[:, :, None]).sum(axis=0)[:, 0], -wd.sum(axis=0)])
    return cost, 0.5 * (h + h.T), b, weights


def _weights(r: np.ndarray, cov_src: np.ndarray, cov_dst: np.ndarray) -> np.ndarray:
    return inv_sym3(cov_dst + rotate_covariances(r, cov_src))


def rotate_covariances(r: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """``R C_i Rᵀ`` for a stack of covariances, as one ``(N, 9) x (9, 9)`` product."""
    flat = covs.reshape(len(covs), 9) @ np.kron(r, r).T
    return flat.reshape(-1, 3, 3)


def inv_sym3(m: np.ndarray) -> np.ndarray:
    """Batched inverse of symmetric ``(N, 3, 3)`` matrices via the adjugate."""
    a, b, c = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    d, e, f = m[:, 1, 1], m[:, 1, 2], m[:, 2, 2]
    c00 = d * f - e * e
    c01 = c * e - b * f
    c02 = b * e - c * d
    det = a * c00 + b * c01 + c * c02
    out = np.empty_like(m)
    out[:, 0, 0] = c00
    out[:, 0, 1] = out[:, 1, 0] = c01
    out[:, 0, 2] = out[:, 2, 0] = c02
    out[:, 1, 1] = a * f - c * c
    out[:, 1, 2] = out[:, 2, 1] = b * c - a * e
    out[:, 2, 2] = a * d - b * b
    return out / det[:, None, None]


def _cost(pose: Pose, src, dst, cov_src, cov_dst) -> float:
    d = dst - (src @ pose.rotation.T + pose.translation)
    w = _weights(pose.rotation, cov_src, cov_dst)
    return float(np.sum(d * (w @ d[:, :, None])[:, :, 0]))


def _associate(pose: Pose, src: np.ndarray, target: MapCloud, gate: float
               ) -> tuple[np.ndarray, np.ndarray]:
    idx, dist = target.nearest(pose.transform(src), max_distance=gate)
    mask = np.isfinite(dist)
    return mask, idx[mask]


def gicp_align(source: ScanCloud, target: MapCloud, initial: Pose,
               gate: float = DEFAULT_GATE, max_iters: int = DEFAULT_MAX_ITERS,
               source_covariances: np.ndarray | None = None,
               k_neighbors: int = DEFAULT_K_NEIGHBORS) -> MatchResult:
    """Register ``source`` (body frame) to ``target`` (world frame).

    Gauss-Newton on the gated GICP cost, re-associating nearest neighbours
    every iteration. A step that raises the cost on its own pairs is halved
    up to eight times; if none helps, the solver stops.
    """
    src = source.points
    if len(src) == 0 or len(target) == 0:
        raise RegistrationError("registration needs non-empty source and target")
    if target.covariances is None:
        raise RegistrationError("target map has no covariances")
    cov_src = (
        estimate_point_covariances(src, k_neighbors)
        if source_covariances is None
        else source_covariances
    )
    pose = initial
    converged = False
    iterations = 0
    history: list[tuple[float, float]] = []
    for _ in range(max_iters):
        mask, idx = _associate(pose, src, target, gate)
        if mask.sum() < MIN_CORRESPONDENCES:
            raise RegistrationError(
                f"only {int(mask.sum())} correspondences within {gate} m"
            )
        p, q = src[mask], target.points[idx]
        cp, cq = cov_src[mask], target.covariances[idx]
        cost, h, b, _ = _linearize(pose, p, q, cp, cq)
        if not np.isfinite(cost):
            raise NumericalFailureError("non-finite GICP cost")
        try:
            delta = np.linalg.solve(h, -b)
        except np.linalg.LinAlgError as exc:
            raise RegistrationError(f"singular GICP normal equations: {exc}") from exc
        step = delta
        candidate, new_cost = None, np.inf
        for _ in range(MAX_HALVINGS + 1):
            trial = pose.boxplus(step)
            c = _cost(trial, p, q, cp, cq)
            if c <= cost:
                candidate, new_cost = trial, c
                break
            step = 0.5 * step
        if candidate is None:
            converged = True
            break
        pose = candidate
        iterations += 1
        history.append((cost, new_cost))
        if np.linalg.norm(step) < INCREMENT_TOL or cost - new_cost <= RELATIVE_COST_TOL * cost:
            converged = True
            break

    mask, idx = _associate(pose, src, target, gate)
    n_match = int(mask.sum())
    if n_match < MIN_CORRESPONDENCES:
        raise RegistrationError(f"only {n_match} correspondences at the final pose")
    cost, h, _, _ = _linearize(pose, src[mask], target.points[idx], cov_src[mask],
                               target.covariances[idx])
    return MatchResult(
        pose=pose,
        hessian=h,
        correspondence_rate=n_match / len(src),
        iterations=iterations,
        converged=converged,
        final_cost=cost,
        num_correspondences=n_match,
        cost_history=history,
    )
