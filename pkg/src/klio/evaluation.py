"""Trajectory association, rigid alignment and absolute pose error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import KlioError
from .geometry import Pose, rotation_angle

DEFAULT_MAX_DT = 0.02

Trajectory = Sequence[tuple[float, Pose]]


class EvaluationError(KlioError, ValueError):
    """Association or alignment could not be carried out."""


def associate(est_times, ref_times, max_dt: float = DEFAULT_MAX_DT) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching, each pose used at most once.

    Candidate pairs within ``max_dt`` are accepted in order of increasing
    ``|dt|`` (ties by estimate then reference index). Returned pairs are
    sorted by estimate index.
    """
    est = np.asarray(est_times, dtype=float)
    ref = np.asarray(ref_times, dtype=float)
    if len(est) == 0 or len(ref) == 0:
        raise EvaluationError("both trajectories must be non-empty")
    order = np.argsort(ref, kind="stable")
    ref_sorted = ref[order]
    cand = []
    for i, t in enumerate(est):
        lo = np.searchsorted(ref_sorted, t - max_dt, side="left")
        hi = np.searchsorted(ref_sorted, t + max_dt, side="right")
        for k in range(lo, hi):
            cand.append((abs(ref_sorted[k] - t), i, int(order[k])))
    cand.sort()
    used_e, used_r, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_e and j not in used_r:
            used_e.add(i)
            used_r.add(j)
            pairs.append((i, j))
    if not pairs:
        raise EvaluationError(f"no timestamp pairs within {max_dt} s")
    return sorted(pairs)


def umeyama_align(est_positions, ref_positions) -> Pose:
    """Rigid ``G`` minimising ``Σ ‖ref - (R est + t)‖²`` (scale fixed at 1)."""
    x = np.asarray(est_positions, dtype=float)
    y = np.asarray(ref_positions, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("expected two (N, 3) arrays of equal shape")
    if len(x) < 3:
        raise EvaluationError("alignment needs at least 3 pairs")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    # rank 2 is enough for a unique rotation; collinear or coincident is not
    for c in (xc, yc):
        sv = np.linalg.svd(c, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise EvaluationError("degenerate configuration (collinear or coincident points)")
    cov = yc.T @ xc / len(x)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return Pose(r, my - r @ mx)


@dataclass
class ApeResult:
    rmse: float
    mean: float
    median: float
    max: float
    rot_rmse_deg: float
    num_pairs: int
    alignment: Pose
    times: np.ndarray
    errors: np.ndarray
    rot_errors_deg: np.ndarray

    def report(self) -> str:
        return (
            f"pairs        {self.num_pairs}\n"
            f"ape_rmse     {self.rmse:.6f} m\n"
            f"ape_mean     {self.mean:.6f} m\n"
            f"ape_median   {self.median:.6f} m\n"
            f"ape_max      {self.max:.6f} m\n"
            f"rot_rmse     {self.rot_rmse_deg:.6f} deg\n"
        )

    def key_values(self) -> str:
        return (
            f"num_pairs={self.num_pairs}\n"
            f"ape_rmse={self.rmse!r}\n"
            f"ape_mean={self.mean!r}\n"
            f"ape_median={self.median!r}\n"
            f"ape_max={self.max!r}\n"
            f"rot_rmse_deg={self.rot_rmse_deg!r}\n"
        )

    def error_csv(self) -> str:
        lines = ["timestamp,trans_error_m,rot_error_deg"]
        lines += [f"{t!r},{e!r},{r!r}" for t, e, r in zip(self.times, self.errors, self.rot_errors_deg)]
        return "\n".join(lines) + "\n"


def ape(est: Trajectory, ref: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> ApeResult:
    """Absolute pose error after SE(3) alignment of ``est`` onto ``ref``."""
    pairs = associate([t for t, _ in est], [t for t, _ in ref], max_dt)
    e_poses = [est[i][1] for i, _ in pairs]
    r_poses = [ref[j][1] for _, j in pairs]
    g = umeyama_align([p.translation for p in e_poses], [p.translation for p in r_poses])
    aligned = [g @ p for p in e_poses]
    err = np.array([np.linalg.norm(a.translation - r.translation) for a, r in zip(aligned, r_poses)])
    rot = np.degrees([rotation_angle(r.rotation.T @ a.rotation) for a, r in zip(aligned, r_poses)])
    return ApeResult(
        rmse=float(np.sqrt(np.mean(err**2))),
        mean=float(err.mean()),
        median=float(np.median(err)),
        max=float(err.max()),
        rot_rmse_deg=float(np.sqrt(np.mean(rot**2))),
        num_pairs=len(pairs),
        alignment=g,
        times=np.array([est[i][0] for i, _ in pairs]),
        errors=err,
        rot_errors_deg=rot,
    )


def ape_rmse(est: Trajectory, ref: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> float:
    return ape(est, ref, max_dt).rmse
