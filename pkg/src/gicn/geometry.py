"""Points, axis-aligned boxes, IoU and GIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateBoxError(ValueError):
    """Raised when IoU is requested for two boxes whose union has zero volume."""


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.isfinite([self.x, self.y, self.z]).all():
            raise ValueError(f"non-finite point {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Point3":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Aabb:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=float).reshape(3)
        hi = np.asarray(self.max_corner, dtype=float).reshape(3)
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("non-finite box corner")
        if np.any(lo > hi):
            raise ValueError(f"inverted box: min {lo} > max {hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def from_points(cls, pts) -> "Aabb":
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot box an empty point set")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @classmethod
    def canonical(cls, corners) -> "Aabb":
        """Box from a raw 6-vector, swapping inverted corners per axis."""
        c = np.asarray(corners, dtype=float).reshape(6)
        return cls(np.minimum(c[:3], c[3:]), np.maximum(c[:3], c[3:]))

    @property
    def extents(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.min_corner, self.max_corner])

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return np.all((pts >= self.min_corner - tol) & (pts <= self.max_corner + tol), axis=1)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min_corner, other.min_corner),
                    np.maximum(self.max_corner, other.max_corner))

    def __eq__(self, other):
        return (isinstance(other, Aabb) and np.array_equal(self.min_corner, other.min_corner)
                and np.array_equal(self.max_corner, other.max_corner))

    def __hash__(self):
        return hash((tuple(self.min_corner), tuple(self.max_corner)))


def aabb_volume(b: Aabb) -> float:
    return float(np.prod(b.extents))


def _inter_union_hull(a: Aabb, b: Aabb) -> tuple[float, float, float]:
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = aabb_volume(a) + aabb_volume(b) - inter
    hull = aabb_volume(a.union(b))
    if union <= 0.0:
        raise DegenerateBoxError("IoU undefined: union of the two boxes has zero volume")
    return inter, union, hull


def aabb_iou(a: Aabb, b: Aabb) -> float:
    inter, union, _ = _inter_union_hull(a, b)
    return inter / union


def aabb_giou(a: Aabb, b: Aabb) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union."""
    inter, union, hull = _inter_union_hull(a, b)
    return inter / union - (hull - union) / hull


def centroid(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("centroid of an empty point set")
    return pts.mean(axis=0)


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.positions) == 0:
            raise ValueError("point cloud needs at least one point")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(self.colors) != len(self.positions):
                raise ValueError(
                    f"{len(self.colors)} colors for {len(self.positions)} points")

    def __len__(self) -> int:
        return len(self.positions)
