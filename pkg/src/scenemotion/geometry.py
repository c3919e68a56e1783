"""Point-cloud primitives: sampling, pooling, orthographic projection and view fusion."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class SceneCloud:
    coords: np.ndarray       # (N, 3) meters
    colors: np.ndarray       # (N, 3) in [0, 1]
    instance_id: np.ndarray  # (N,) int
    class_id: np.ndarray     # (N,) int, 0 = background
    goal_mask: np.ndarray = field(default=None)  # (N,) bool

    def __post_init__(self):
        n = len(self.coords)
        if n < 1:
            raise ValueError("a scene cloud needs at least one point")
        if self.goal_mask is None:
            object.__setattr__(self, "goal_mask", np.zeros(n, dtype=bool))
        for name in ("colors", "instance_id", "class_id", "goal_mask"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"SceneCloud.{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.coords)

    def with_goal(self, instance: int) -> "SceneCloud":
        mask = self.instance_id == instance
        if not mask.any():
            raise ValueError(f"instance {instance} has no points")
        return replace(self, goal_mask=mask)


@dataclass(frozen=True)
class ViewProjection:
    matrix: np.ndarray        # (3, 2) world meters -> pixel units
    pixel_offset: np.ndarray  # (2,)
    image_size: tuple[int, int]


@dataclass(frozen=True)
class TeacherView:
    projection: ViewProjection
    instance_map: np.ndarray  # (H, W) int, -1 where no surface was hit
    features: np.ndarray      # (H, W, F)


@dataclass(frozen=True)
class TeacherViewSet:
    views: tuple[TeacherView, ...]

    def __len__(self) -> int:
        return len(self.views)


@dataclass(frozen=True)
class AABB:
    min_corner: np.ndarray
    max_corner: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.min_corner, self.max_corner])


def farthest_point_sample(coords: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    d = np.sum((coords - coords[start]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        d = np.minimum(d, np.sum((coords - coords[nxt]) ** 2, axis=1))
    return chosen


def knn_indices(coords: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """(m, k) indices of the k nearest coords per center, ties by lowest index."""
    coords = np.asarray(coords, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    n = len(coords)
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available points")
    kk = min(n, 2 * k + 8)
    if kk == n:
        exact = np.sum((centers[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
        idx = np.broadcast_to(np.arange(n), exact.shape)
        return np.lexsort((idx, exact), axis=1)[:, :k]
    # preselect candidates on the expanded form, then sort them on exact distances
    approx = np.sum(centers ** 2, 1)[:, None] - 2.0 * centers @ coords.T + np.sum(coords ** 2, 1)[None, :]
    cand = np.argpartition(approx, kk - 1, axis=1)[:, :kk]
    exact = np.sum((centers[:, None, :] - coords[cand]) ** 2, axis=-1)
    order = np.lexsort((cand, exact), axis=1)[:, :k]
    out = np.take_along_axis(cand, order, axis=1)
    kth = np.take_along_axis(exact, order[:, -1:], axis=1)[:, 0]
    # a non-candidate can only tie with the k-th neighbour if the preselection boundary reaches it
    for r in np.nonzero(exact.max(axis=1) <= kth + 1e-9)[0]:
        dr = np.sum((coords - centers[r]) ** 2, axis=1)
        out[r] = np.lexsort((np.arange(n), dr))[:k]
    return out


def knn_pool(coords, feats, centers, k: int):
    """Average features over the k nearest points of each center.

    Works on numpy arrays or on autodiff Tensors (gradients flow to ``feats``).
    """
    idx = knn_indices(coords, centers, k)
    if isinstance(feats, Tensor):
        return ad.mean(ad.gather(feats, idx), axis=-2)
    feats = np.asarray(feats, dtype=np.float64)
    return feats[idx].mean(axis=1)


def project_points(coords: np.ndarray, view: ViewProjection) -> tuple[np.ndarray, np.ndarray]:
    pix = np.rint(np.asarray(coords, dtype=np.float64) @ view.matrix + view.pixel_offset).astype(np.int64)
    h, w = view.image_size
    valid = (pix[:, 0] >= 0) & (pix[:, 0] < h) & (pix[:, 1] >= 0) & (pix[:, 1] < w)
    return pix, valid


def fuse_multiview(cloud: SceneCloud, views: TeacherViewSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-point mean of teacher pixel features over the views that see the point.

    A view contributes when the point projects inside the image and the view's
    instance map at that pixel carries the point's own instance id.  Returns
    (targets (N, F), covered (N,)); uncovered rows are zero.
    """
    if len(views) == 0:
        raise ValueError("fuse_multiview needs at least one view")
    n = len(cloud)
    f = views.views[0].features.shape[-1]
    acc = np.zeros((n, f))
    count = np.zeros(n)
    for view in views.views:
        pix, valid = project_points(cloud.coords, view.projection)
        rows = np.nonzero(valid)[0]
        hit = view.instance_map[pix[rows, 0], pix[rows, 1]] == cloud.instance_id[rows]
        rows = rows[hit]
        count[rows] += 1
        # running mean: identical contributions reproduce the feature bit-exactly
        acc[rows] += (view.features[pix[rows, 0], pix[rows, 1]] - acc[rows]) / count[rows, None]
    return acc, count > 0


def aabb_of(points: np.ndarray) -> AABB:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("aabb_of needs a non-empty (G, 3) point set")
    return AABB(points.min(axis=0), points.max(axis=0))
