"""Training targets: Gaussian center heatmaps, boxes, class radii and size groups."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dataset import Scene
from .geometry import Aabb, centroid

SIGMA_G = 0.4
MIN_SIGMA_HALF_EXTENT = 0.01


@dataclass(frozen=True)
class GaussianSpec:
    center: np.ndarray
    sigma: np.ndarray
    center_index: int = -1

    def evaluate(self, pts) -> np.ndarray:
        d = (np.asarray(pts, dtype=float).reshape(-1, 3) - self.center) / self.sigma
        return np.exp(-0.5 * np.sum(d * d, axis=1))


@dataclass
class HeatmapGT:
    values: np.ndarray
    focal_positive: np.ndarray
    centers: dict[int, GaussianSpec] = field(default_factory=dict)


def gt_center_index(points) -> int:
    """Index of the member point nearest the centroid; lowest index on ties."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("instance has no points")
    d2 = np.sum((pts - centroid(pts)) ** 2, axis=1)
    return int(np.argmin(d2))


def gt_center_point(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts[gt_center_index(pts)].copy()


def gaussian_spec(points) -> GaussianSpec:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    k = gt_center_index(pts)
    half = (pts.max(axis=0) - pts.min(axis=0)) / 2
    return GaussianSpec(pts[k].copy(), np.maximum(half, MIN_SIGMA_HALF_EXTENT) / 2, k)


def gt_heatmap(positions, instance_id, sigma_g: float = SIGMA_G) -> HeatmapGT:
    """Per-point Gaussian of the point's own instance; 0 on background.

    The focal indicator of a background point uses the Gaussian of the
    nearest instance center.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    inst = np.asarray(instance_id).reshape(-1)
    values = np.zeros(len(pos))
    ghat = np.zeros(len(pos))
    specs: dict[int, GaussianSpec] = {}
    for t in np.unique(inst[inst >= 0]):
        members = np.flatnonzero(inst == t)
        spec = gaussian_spec(pos[members])
        specs[int(t)] = GaussianSpec(spec.center, spec.sigma, int(members[spec.center_index]))
        g = spec.evaluate(pos[members])
        g[spec.center_index] = 1.0
        values[members] = g
        ghat[members] = g
    bg = np.flatnonzero(inst < 0)
    if specs and len(bg):
        order = list(specs)
        centers = np.stack([specs[t].center for t in order])
        d2 = np.sum((pos[bg, None, :] - centers[None]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)
        for j, t in enumerate(order):
            sel = bg[nearest == j]
            ghat[sel] = specs[t].evaluate(pos[sel])
    return HeatmapGT(values, ghat > sigma_g, specs)


def gt_boxes(positions, instance_id) -> dict[int, Aabb]:
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    inst = np.asarray(instance_id).reshape(-1)
    return {int(t): Aabb.from_points(pos[inst == t]) for t in np.unique(inst[inst >= 0])}


def _instance_boxes(scenes: Iterable[Scene]) -> list[tuple[int, Aabb]]:
    out = []
    for scene in scenes:
        for t, box in gt_boxes(scene.positions, scene.instance_id).items():
            out.append((scene.instance_class(t), box))
    return out


@dataclass
class ClassRadiusTable:
    radii: dict[int, float]

    @property
    def global_radius(self) -> float:
        return float(np.mean(list(self.radii.values()))) if self.radii else 0.0

    def lookup(self, cls: int) -> float:
        return self.radii.get(int(cls), self.global_radius)

    def as_array(self, n_classes: int) -> np.ndarray:
        return np.array([self.lookup(c) for c in range(n_classes)])


@dataclass
class SizeGroupTable:
    sizes: np.ndarray
    class_to_group: dict[int, int]
    requested_k: int = 6

    @property
    def k(self) -> int:
        return len(self.sizes)

    def group_of(self, cls: int) -> int:
        return self.class_to_group[int(cls)]


def compute_class_radii(scenes: Iterable[Scene]) -> ClassRadiusTable:
    """Mean half box-diagonal per class."""
    per_class: dict[int, list[float]] = {}
    for cls, box in _instance_boxes(scenes):
        per_class.setdefault(cls, []).append(float(np.linalg.norm(box.extents) / 2))
    return ClassRadiusTable({c: float(np.mean(v)) for c, v in sorted(per_class.items())})


def compute_size_groups(scenes: Iterable[Scene], k: int = 6) -> SizeGroupTable:
    """Classes sorted by mean box volume, split into k contiguous near-equal groups."""
    extents: dict[int, list[np.ndarray]] = {}
    for cls, box in _instance_boxes(scenes):
        extents.setdefault(cls, []).append(box.extents)
    if not extents:
        raise ValueError("no instances to build size groups from")
    classes = sorted(extents, key=lambda c: (float(np.mean([np.prod(e) for e in extents[c]])), c))
    k_eff = min(k, len(classes))
    groups = np.array_split(np.array(classes), k_eff)
    sizes = np.stack([np.mean([e for c in g for e in extents[int(c)]], axis=0) for g in groups])
    mapping = {int(c): gi for gi, g in enumerate(groups) for c in g}
    return SizeGroupTable(sizes, mapping, requested_k=k)


def save_stats(path, radii: ClassRadiusTable, groups: SizeGroupTable) -> None:
    doc = {
        "class_radii": {str(c): r for c, r in radii.radii.items()},
        "size_groups": {
            "requested_k": groups.requested_k,
            "k": groups.k,
            "sizes": groups.sizes.tolist(),
            "class_to_group": {str(c): g for c, g in groups.class_to_group.items()},
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_stats(path) -> tuple[ClassRadiusTable, SizeGroupTable]:
    doc = json.loads(Path(path).read_text())
    radii = ClassRadiusTable({int(c): float(r) for c, r in doc["class_radii"].items()})
    sg = doc["size_groups"]
    groups = SizeGroupTable(np.array(sg["sizes"], dtype=float),
                            {int(c): int(g) for c, g in sg["class_to_group"].items()},
                            requested_k=int(sg["requested_k"]))
    return radii, groups
