"""Point containers, voxel filtering, neighbour search and GICP covariances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloudError, NoCorrespondenceError

PLANE_EPSILON = 1e-3
DEFAULT_K_NEIGHBORS = 20


@dataclass
class ScanCloud:
    """A LiDAR sweep in the sensor frame.

    ``timestamp`` is the header time of the sweep and marks its end.
    ``time_offsets`` hold how long *before* the header each point was
    captured, so they lie in ``[0, sweep duration]`` and a point's absolute
    capture time is ``timestamp - time_offset``.
    """

    points: np.ndarray
    time_offsets: np.ndarray | None = None
    intensities: np.ndarray | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        if self.time_offsets is None:
            self.time_offsets = np.zeros(n)
        else:
            self.time_offsets = np.asarray(self.time_offsets, dtype=float).reshape(n)
        if self.intensities is None:
            self.intensities = np.zeros(n)
        else:
            self.intensities = np.asarray(self.intensities, dtype=float).reshape(n)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> ScanCloud:
        return ScanCloud(points, self.time_offsets.copy(), self.intensities.copy(), self.timestamp)


def voxel_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(points / resolution).astype(np.int64)


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    """Integer voxel triples to order-preserving scalars where the range allows."""
    keys = keys - keys.min(axis=0)
    span = keys.max(axis=0) + 1
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2.0**62:
        # lexicographic row view keeps the same ordering without packing
        keys = np.ascontiguousarray(keys)
        return keys.view([("x", np.int64), ("y", np.int64), ("z", np.int64)]).reshape(-1)
    return (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]


def voxel_downsample(cloud: ScanCloud, resolution: float) -> ScanCloud:
    """One point per occupied voxel: the centroid of its members.

    Time offsets and intensities are averaged the same way. Output is sorted
    by voxel index, which keeps the result independent of input order.
    """
    if not resolution > 0:
        raise ValueError(f"voxel resolution must be positive, got {resolution}")
    if len(cloud) == 0:
        return ScanCloud(np.zeros((0, 3)), timestamp=cloud.timestamp)
    keys = voxel_keys(cloud.points, resolution)
    _, inverse, counts = np.unique(_pack_keys(keys), return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def mean(values: np.ndarray) -> np.ndarray:
        return np.bincount(inverse, weights=values, minlength=m) / counts

    points = np.stack([mean(cloud.points[:, i]) for i in range(3)], axis=1)
    return ScanCloud(points, mean(cloud.time_offsets), mean(cloud.intensities), cloud.timestamp)


def voxel_downsample_points(points: np.ndarray, resolution: float) -> np.ndarray:
    return voxel_downsample(ScanCloud(points), resolution).points


def estimate_point_covariances(points: np.ndarray, k_neighbors: int = DEFAULT_K_NEIGHBORS,
                               tree: cKDTree | None = None,
                               epsilon: float = PLANE_EPSILON) -> np.ndarray:
    """Plane-regularised neighbourhood covariances, shape ``(N, 3, 3)``.

    The sample covariance of each point's ``k`` nearest neighbours is
    decomposed and its eigenvalues replaced by ``(epsilon, 1, 1)``, smallest
    first, so the normal direction is tight and the surface directions loose.
    """
    points = np.asarray(points, dtype=float)
    if k_neighbors < 4:
        raise ValueError(f"k_neighbors must be at least 4, got {k_neighbors}")
    if len(points) < k_neighbors:
        raise DegenerateCloudError(
            f"need at least {k_neighbors} points for covariance estimation, got {len(points)}"
        )
    tree = cKDTree(points) if tree is None else tree
    _, idx = tree.query(points, k=k_neighbors)
    return regularize(raw_covariances(points, idx), epsilon)


def raw_covariances(points: np.ndarray, neighbor_idx: np.ndarray) -> np.ndarray:
    nb = points[neighbor_idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    return np.swapaxes(centered, 1, 2) @ centered / neighbor_idx.shape[1]


def regularize(covs: np.ndarray, epsilon: float = PLANE_EPSILON) -> np.ndarray:
    _, vecs = np.linalg.eigh(covs)
    scale = np.array([epsilon, 1.0, 1.0])
    out = (vecs * scale) @ np.swapaxes(vecs, 1, 2)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


@dataclass
class MapCloud:
    """World-frame target cloud with a kd-tree and cached covariances.

    Treated as immutable once built; rebuild to change it.
    """

    points: np.ndarray
    tree: cKDTree = field(repr=False)
    covariances: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, points: np.ndarray, k_neighbors: int | None = DEFAULT_K_NEIGHBORS) -> MapCloud:
        """Index ``points``; ``k_neighbors=None`` skips covariance estimation."""
        points = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        tree = cKDTree(points)
        covs = None
        if k_neighbors is not None:
            covs = estimate_point_covariances(points, k_neighbors, tree=tree)
        return cls(points, tree, covs)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries: np.ndarray, max_distance: float = np.inf
                ) -> tuple[np.ndarray, np.ndarray]:
        """Exact nearest neighbours of ``(N, 3)`` queries.

        Queries with no neighbour within ``max_distance`` get index
        ``len(self)`` and distance ``inf``.
        """
        if len(self.points) == 0:
            raise NoCorrespondenceError("nearest-neighbour query on an empty map")
        dist, idx = self.tree.query(queries, k=1, distance_upper_bound=max_distance)
        return idx, dist


def nearest_neighbor(map_cloud: MapCloud, query) -> tuple[int, float]:
    idx, dist = map_cloud.nearest(np.asarray(query, dtype=float).reshape(1, 3))
    return int(idx[0]), float(dist[0])
