"""
Point-cloud kernels: normalization, sampling, grouping, rotation and the
Chamfer distance used as loss and metric.

A PointCloud is an (N, 3) float64 numpy array. Everything here is a pure
function of its arguments.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from modules.errors import DegenerateInputError, InvalidInputError

logger = logging.getLogger("Geometry")

CANONICAL_ORDER = "lexicographic-xyz"


# ==============================
# TYPES
# ==============================
@dataclass(frozen=True)
class PatchSet:
    centers: np.ndarray          # (M, 3)
    groups: np.ndarray           # (M, k) indices into the parent cloud
    center_indices: np.ndarray   # (M,) parent index of each center
    order: str = field(default=CANONICAL_ORDER)

    @property
    def patch_count(self):
        return self.groups.shape[0]

    @property
    def patch_size(self):
        return self.groups.shape[1]

    def points(self, cloud):
        """(M, k, 3) member points in cloud coordinates."""
        return np.asarray(cloud, dtype=np.float64)[self.groups]


@dataclass(frozen=True)
class RotationSpec:
    axis: np.ndarray
    angle: float

    @property
    def matrix(self):
        # Rodrigues
        x, y, z = self.axis
        c, s = np.cos(self.angle), np.sin(self.angle)
        K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        return np.eye(3) + s * K + (1.0 - c) * (K @ K)


IDENTITY_ROTATION = RotationSpec(axis=np.array([0.0, 0.0, 1.0]), angle=0.0)


# ==============================
# HELPERS
# ==============================
def as_cloud(cloud, name="cloud"):
    """Validate and return an (N, 3) float64 array."""
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.isfinite(pts).all():
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return pts


def squared_distances(a, b):
    """Exact pairwise squared distances, shape (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def canonical_order(centers, tiebreak):
    """Lexicographic order on (x, y, z); equal centers fall back to tiebreak."""
    centers = np.asarray(centers)
    return np.lexsort((tiebreak, centers[:, 2], centers[:, 1], centers[:, 0]))


# ==============================
# OPERATIONS
# ==============================
def normalize_unit_sphere(cloud):
    pts = as_cloud(cloud)
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt(np.einsum("ij,ij->i", centered, centered)).max()
    if not scale > 0.0:
        raise DegenerateInputError(f"all {pts.shape[0]} points coincide; cannot normalize")
    return centered / scale


def farthest_point_sample(cloud, k, seed=0):
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"cannot sample k={k} points from a cloud of {n}")

    chosen = np.empty(k, dtype=np.int64)
    min_dist = np.full(n, np.inf)
    current = int(seed) % n
    for i in range(k):
        chosen[i] = current
        diff = pts - pts[current]
        np.minimum(min_dist, np.einsum("ij,ij->i", diff, diff), out=min_dist)
        min_dist[current] = -1.0  # never re-pick
        # argmax returns the first maximizer: smallest index on ties
        current = int(np.argmax(min_dist))
    return chosen


def knn_group(cloud, center_indices, k):
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"cannot group k={k} points from a cloud of {n}")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    centers = pts[center_indices]

    d = squared_distances(centers, pts)
    # the center always takes the first slot, even against exact duplicates
    d[np.arange(len(center_indices)), center_indices] = -1.0
    groups = np.argsort(d, axis=1, kind="stable")[:, :k]

    order = canonical_order(centers, center_indices)
    return PatchSet(
        centers=centers[order],
        groups=groups[order],
        center_indices=center_indices[order],
    )


def group_around(cloud, centers, k):
    """kNN groups of `cloud` around foreign centers (e.g. a target cloud
    grouped at its input's patch centers). Ties go to the smaller index."""
    pts = as_cloud(cloud)
    if not 1 <= k <= pts.shape[0]:
        raise InvalidInputError(f"cannot group k={k} points from a cloud of {pts.shape[0]}")
    d = squared_distances(np.asarray(centers, dtype=np.float64), pts)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def chamfer_distance(P, G):
    p = as_cloud(P, "P")
    g = as_cloud(G, "G")
    d = squared_distances(p, g)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def random_rotation(seed, max_angle):
    if not 0.0 < max_angle <= np.pi:
        raise InvalidInputError(f"max_angle must lie in (0, pi], got {max_angle}")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    angle = float(rng.uniform(0.0, max_angle))
    return RotationSpec(axis=axis, angle=angle)


def apply_rotation(cloud, rot, inverse=False):
    pts = as_cloud(cloud)
    R = rot.matrix
    # row vectors: p' = R p  <=>  P' = P R^T
    return pts @ R if inverse else pts @ R.T


def resize_cyclic(cloud, n):
    """Repeat (or cut) the rows of `cloud` cyclically to exactly n rows."""
    pts = np.asarray(cloud, dtype=np.float64)
    return pts[np.arange(n) % pts.shape[0]]
