"""Keyframe selection and local-map reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoCorrespondenceError
from .geometry import Pose
from .pointcloud import DEFAULT_K_NEIGHBORS, MapCloud, ScanCloud, voxel_downsample_points


@dataclass(frozen=True)
class Keyframe:
    id: int
    pose: Pose
    cloud: ScanCloud


@dataclass
class KeyframeSet:
    keyframes: list[Keyframe] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    def add(self, pose: Pose, cloud: ScanCloud) -> Keyframe:
        if len(cloud) == 0:
            raise ValueError("keyframe cloud must not be empty")
        next_id = self.keyframes[-1].id + 1 if self.keyframes else 0
        kf = Keyframe(next_id, pose, cloud)
        self.keyframes.append(kf)
        return kf

    def positions(self) -> np.ndarray:
        return np.array([k.pose.translation for k in self.keyframes]).reshape(-1, 3)

    def nearest(self, center, n: int) -> list[Keyframe]:
        """The ``n`` keyframes closest to ``center``, ties broken by lower id."""
        d = np.linalg.norm(self.positions() - np.asarray(center, dtype=float), axis=1)
        ids = np.array([k.id for k in self.keyframes])
        order = np.lexsort((ids, d))[:n]
        return [self.keyframes[i] for i in order]


def should_insert_keyframe(gamma: float, gamma_th: float, keyframes: KeyframeSet) -> bool:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"correspondence rate must lie in [0, 1], got {gamma}")
    return len(keyframes) == 0 or gamma < gamma_th


def build_local_map(keyframes: KeyframeSet, center, n: int, voxel_res: float,
                    k_neighbors: int = DEFAULT_K_NEIGHBORS) -> tuple[MapCloud, list[int]]:
    """Merge the ``n`` nearest keyframes into a downsampled world-frame map.

    Returns the map and the ids of the keyframes it was built from.
    """
    if len(keyframes) == 0:
        raise NoCorrespondenceError("cannot build a local map from an empty keyframe set")
    chosen = keyframes.nearest(center, n)
    world = np.vstack([k.pose.transform(k.cloud.points) for k in chosen])
    points = voxel_downsample_points(world, voxel_res)
    return MapCloud.build(points, k_neighbors), [k.id for k in chosen]
