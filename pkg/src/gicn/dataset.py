"""Synthetic labeled scenes, scene files, sliding-window cubes and block features."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Aabb, PointCloud

SOLID_CUBOID = "solid_cuboid"
SOLID_ELLIPSOID = "solid_ellipsoid"
HOLLOW_SHELL = "hollow_shell"
FAMILIES = (SOLID_CUBOID, SOLID_ELLIPSOID, HOLLOW_SHELL)


class SceneFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class Scene:
    cloud: PointCloud
    semantic_id: np.ndarray
    instance_id: np.ndarray
    n_classes: int

    def __post_init__(self):
        n = len(self.cloud)
        self.semantic_id = np.asarray(self.semantic_id, dtype=np.int64).reshape(-1)
        self.instance_id = np.asarray(self.instance_id, dtype=np.int64).reshape(-1)
        if len(self.semantic_id) != n or len(self.instance_id) != n:
            raise ValueError("label sequences must have one entry per point")
        if self.semantic_id.size and (self.semantic_id.min() < 0
                                      or self.semantic_id.max() >= self.n_classes):
            raise ValueError("semantic id out of range")
        for inst in self.instance_ids():
            classes = np.unique(self.semantic_id[self.instance_id == inst])
            if len(classes) != 1:
                raise ValueError(f"instance {inst} spans classes {classes.tolist()}")

    @property
    def positions(self) -> np.ndarray:
        return self.cloud.positions

    @property
    def colors(self) -> np.ndarray:
        if self.cloud.colors is None:
            return np.full_like(self.cloud.positions, 0.5)
        return self.cloud.colors

    @property
    def extent(self) -> Aabb:
        return Aabb.from_points(self.positions)

    def __len__(self) -> int:
        return len(self.cloud)

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.instance_id)
        return ids[ids >= 0]

    def instance_class(self, inst: int) -> int:
        return int(self.semantic_id[np.flatnonzero(self.instance_id == inst)[0]])

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.colors, other.colors)
                and np.array_equal(self.semantic_id, other.semantic_id)
                and np.array_equal(self.instance_id, other.instance_id))


@dataclass
class ClassSpec:
    name: str
    family: str
    mean_extent: tuple[float, float, float]
    color: tuple[float, float, float]
    jitter: float = 0.15
    points: tuple[int, int] = (150, 300)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        if min(self.mean_extent) <= 0:
            raise ValueError("extents must be positive")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")
        if not 1 <= self.points[0] <= self.points[1]:
            raise ValueError("empty points-per-instance range")


def default_classes() -> list[ClassSpec]:
    return [
        ClassSpec("crate", SOLID_CUBOID, (0.22, 0.22, 0.26), (0.85, 0.35, 0.25)),
        ClassSpec("ball", SOLID_ELLIPSOID, (0.34, 0.34, 0.30), (0.25, 0.70, 0.30)),
        ClassSpec("tub", HOLLOW_SHELL, (0.48, 0.36, 0.24), (0.25, 0.35, 0.85)),
    ]


@dataclass
class SceneConfig:
    """Scene synthesis settings. Class 0 is background; ``classes[i]`` is class i + 1."""

    classes: list[ClassSpec] = field(default_factory=default_classes)
    instances: tuple[int, int] = (2, 4)
    side: tuple[float, float] = (1.6, 2.2)
    floor_density: float = 250.0
    background_color: tuple[float, float, float] = (0.55, 0.55, 0.5)
    color_noise: float = 0.05
    gap: float = 0.05
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.instances[0] <= self.instances[1]:
            raise ValueError("empty instance-count range")
        if not 0 < self.side[0] <= self.side[1]:
            raise ValueError("scene side range must be positive and non-empty")
        if self.floor_density <= 0:
            raise ValueError("floor density must be positive")

    @property
    def n_classes(self) -> int:
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "classes" in d:
            d["classes"] = [ClassSpec(**{k: tuple(v) if isinstance(v, list) else v
                                         for k, v in c.items()}) for c in d["classes"]]
        for key in ("instances", "side", "background_color"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _sample_shape(rng, family: str, ext: np.ndarray, n: int) -> np.ndarray:
    """Points in a local frame spanning [0, ext]."""
    half = ext / 2
    if family == SOLID_CUBOID:
        return rng.uniform(0.0, 1.0, (n, 3)) * ext
    if family == SOLID_ELLIPSOID:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.uniform(0.0, 1.0, (n, 1)) ** (1 / 3)
        return half + d * r * half
    # open-top box shell: floor plus four walls, sampled by face area
    ex, ey, ez = ext
    areas = np.array([ex * ey, ex * ez, ex * ez, ey * ez, ey * ez])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(0.0, 1.0, (n, 3)) * ext
    pts = u.copy()
    pts[face == 0, 2] = 0.0
    pts[face == 1, 1] = 0.0
    pts[face == 2, 1] = ey
    pts[face == 3, 0] = 0.0
    pts[face == 4, 0] = ex
    return pts


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Floor plane plus non-overlapping instances, fully determined by (config, seed)."""
    rng = np.random.default_rng([config.seed, seed])
    sx, sy = rng.uniform(config.side[0], config.side[1], 2)
    n_inst = int(rng.integers(config.instances[0], config.instances[1] + 1))
    hollow = [i for i, c in enumerate(config.classes) if c.family == HOLLOW_SHELL]

    placed: list[tuple[np.ndarray, float, np.ndarray]] = []
    positions, colors, sem, inst = [], [], [], []
    for t in range(n_inst):
        if t == 0 and hollow:
            cls_idx = int(rng.choice(hollow))
        else:
            cls_idx = int(rng.integers(len(config.classes)))
        spec = config.classes[cls_idx]
        ext = np.asarray(spec.mean_extent) * (1 + rng.uniform(-spec.jitter, spec.jitter, 3))
        radius = float(np.linalg.norm(ext) / 2)
        for _ in range(config.max_retries):
            lo = rng.uniform([config.gap, config.gap], [sx - ext[0] - config.gap,
                                                      sy - ext[1] - config.gap])
            centre = np.array([lo[0] + ext[0] / 2, lo[1] + ext[1] / 2])
            # footprints disjoint and neither center inside the other's radius
            if all(np.any(np.abs(centre - c) >= (ext[:2] + e) / 2 + config.gap)
                   and np.linalg.norm(centre - c) >= max(radius, r) + config.gap
                   for c, r, e in placed):
                break
        else:
            raise GenerationError(
                f"could not place instance {t} after {config.max_retries} tries (seed={seed})")
        placed.append((centre, radius, ext[:2]))
        n = int(rng.integers(spec.points[0], spec.points[1] + 1))
        base = np.array([lo[0], lo[1], config.gap / 2])
        positions.append(_sample_shape(rng, spec.family, ext, n) + base)
        tint = np.asarray(spec.color) + rng.normal(0, config.color_noise, 3)
        colors.append(tint + rng.normal(0, config.color_noise, (n, 3)))
        sem.append(np.full(n, cls_idx + 1))
        inst.append(np.full(n, t))

    n_floor = max(1, int(round(config.floor_density * sx * sy)))
    floor = np.column_stack([rng.uniform(0, sx, n_floor), rng.uniform(0, sy, n_floor),
                             rng.uniform(0, 0.01, n_floor)])
    positions.append(floor)
    colors.append(np.asarray(config.background_color)
                  + rng.normal(0, config.color_noise, (n_floor, 3)))
    sem.append(np.zeros(n_floor, dtype=np.int64))
    inst.append(np.full(n_floor, -1))

    return Scene(
        PointCloud(np.concatenate(positions), np.clip(np.concatenate(colors), 0.0, 1.0)),
        np.concatenate(sem), np.concatenate(inst), config.n_classes)


# --- blocks --------------------------------------------------------------------


@dataclass
class Block:
    origin: np.ndarray
    size: float
    indices: np.ndarray
    sampled: np.ndarray | None = None
    features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.indices)


def window_origins(lo: float, hi: float, cube: float, stride: float) -> np.ndarray:
    """Grid lo + k*stride, with the final cube shifted to end exactly at hi."""
    length = hi - lo
    if length <= cube:
        return np.array([lo])
    out = []
    k = 0
    while k * stride + cube < length - 1e-12:
        out.append(lo + k * stride)
        k += 1
    out.append(hi - cube)
    return np.array(out)


def slice_into_cubes(scene: Scene, cube: float = 1.0, stride: float = 0.5) -> list[Block]:
    if cube <= 0 or not 0 < stride <= cube:
        raise ValueError("need cube > 0 and 0 < stride <= cube")
    ext = scene.extent
    axes = [window_origins(ext.min_corner[a], ext.max_corner[a], cube, stride) for a in range(3)]
    pos = scene.positions
    blocks = []
    for ox in axes[0]:
        in_x = (pos[:, 0] >= ox) & (pos[:, 0] <= ox + cube)
        for oy in axes[1]:
            in_xy = in_x & (pos[:, 1] >= oy) & (pos[:, 1] <= oy + cube)
            for oz in axes[2]:
                mask = in_xy & (pos[:, 2] >= oz) & (pos[:, 2] <= oz + cube)
                idx = np.flatnonzero(mask)
                if len(idx):
                    blocks.append(Block(np.array([ox, oy, oz]), cube, idx))
    return blocks


def sample_points(block: Block, n: int = 4096, seed: int = 0) -> Block:
    """Uniform sample of n member points, with replacement only when the block is short."""
    if len(block) == 0:
        raise ValueError("cannot sample an empty block")
    rng = np.random.default_rng(seed)
    replace = len(block) < n
    picked = rng.choice(block.indices, size=n, replace=replace)
    return dataclasses.replace(block, sampled=picked, features=None)


def build_features(block: Block, scene: Scene) -> np.ndarray:
    """Per sampled point: RGB, xyz normalized in the cube, xyz normalized in the scene."""
    idx = block.sampled if block.sampled is not None else block.indices
    pos = scene.positions[idx]
    ext = scene.extent
    span = np.where(ext.extents > 0, ext.extents, 1.0)
    local = np.clip((pos - block.origin) / block.size, 0.0, 1.0)
    room = np.clip((pos - ext.min_corner) / span, 0.0, 1.0)
    return np.column_stack([scene.colors[idx], local, room])


# --- files ---------------------------------------------------------------------


def write_scene(scene: Scene, path) -> None:
    """Header ``N L`` then one ``x y z r g b semantic_id instance_id`` row per point."""
    lines = [f"{len(scene)} {scene.n_classes}"]
    for p, c, s, i in zip(scene.positions, scene.colors, scene.semantic_id, scene.instance_id):
        lines.append(" ".join([*(repr(float(v)) for v in p), *(repr(float(v)) for v in c),
                               str(int(s)), str(int(i))]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path) -> Scene:
    rows = Path(path).read_text().splitlines()
    if not rows or not rows[0].strip():
        raise SceneFormatError(f"{path}: no points")
    head = rows[0].split()
    if len(head) != 2:
        raise SceneFormatError(f"{path}:1: header must be 'N L'")
    try:
        n, n_classes = int(head[0]), int(head[1])
    except ValueError:
        raise SceneFormatError(f"{path}:1: header must hold two integers") from None
    if n < 1:
        raise SceneFormatError(f"{path}: no points")
    body = [(k + 2, r) for k, r in enumerate(rows[1:]) if r.strip()]
    if len(body) != n:
        raise SceneFormatError(f"{path}: header declares {n} points, found {len(body)} rows")
    xyz = np.empty((n, 3))
    rgb = np.empty((n, 3))
    sem = np.empty(n, dtype=np.int64)
    inst = np.empty(n, dtype=np.int64)
    for k, (lineno, row) in enumerate(body):
        f = row.split()
        if len(f) != 8:
            raise SceneFormatError(f"{path}:{lineno}: expected 8 fields, got {len(f)}")
        try:
            xyz[k] = [float(v) for v in f[:3]]
            rgb[k] = [float(v) for v in f[3:6]]
            sem[k], inst[k] = int(f[6]), int(f[7])
        except ValueError:
            raise SceneFormatError(f"{path}:{lineno}: malformed number") from None
        if not 0 <= sem[k] < n_classes:
            raise SceneFormatError(f"{path}:{lineno}: semantic id {sem[k]} outside 0..{n_classes - 1}")
    try:
        return Scene(PointCloud(xyz, rgb), sem, inst, n_classes)
    except ValueError as err:
        raise SceneFormatError(f"{path}: {err}") from None


def write_ply(path, positions, colors) -> None:
    """ASCII PLY with float xyz and uchar rgb."""
    positions = np.asarray(positions, dtype=float)
    rgb = np.clip(np.round(np.asarray(colors, dtype=float) * 255), 0, 255).astype(int)
    head = ["ply", "format ascii 1.0", f"element vertex {len(positions)}",
            "property float x", "property float y", "property float z",
            "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    body = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}"
            for p, c in zip(positions, rgb)]
    Path(path).write_text("\n".join(head + body) + "\n")


def instance_palette(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.15, 1.0, (max(n, 1), 3))
