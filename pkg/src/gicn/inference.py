"""Center selection, candidate association, per-block instances and block merging."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import model as M
from .dataset import Block, Scene, build_features, sample_points, slice_into_cubes
from .geometry import Aabb
from .groundtruth import ClassRadiusTable, SizeGroupTable

SELECTION_MODES = ("greedy", "random", "topk")


@dataclass
class SelectionConfig:
    q_theta: float = 0.4
    t_theta: int = 64
    mode: str = "greedy"
    uniform_radius: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.q_theta < 1:
            raise ValueError("Q_theta must lie in (0, 1)")
        if self.t_theta < 1:
            raise ValueError("T_theta must be >= 1")
        if self.mode not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.mode!r}")


@dataclass
class CenterCandidates:
    indices: np.ndarray
    positions: np.ndarray
    values: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def _radius_of(radii, cls: int, cfg: SelectionConfig) -> float:
    if cfg.uniform_radius is not None:
        return cfg.uniform_radius
    if isinstance(radii, ClassRadiusTable):
        return radii.lookup(cls)
    return float(np.asarray(radii)[cls])


def select_centers(q, positions, semantics, radii, cfg: SelectionConfig | None = None
                   ) -> CenterCandidates:
    """Greedy heatmap peak picking with class-radius suppression.

    Repeatedly takes the current argmax (lowest index on ties), stops once it
    falls below ``q_theta`` or ``t_theta`` picks exist, and zeroes every point
    within the pick's class radius. ``mode='random'`` and ``mode='topk'``
    replace the loop with random or top-valued picks (no suppression).
    """
    cfg = cfg or SelectionConfig()
    q = np.array(q, dtype=float).reshape(-1)
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    sem = np.asarray(semantics).reshape(-1)
    if not len(q) == len(pos) == len(sem):
        raise ValueError(f"length mismatch: {len(q)} values, {len(pos)} points, {len(sem)} labels")
    if cfg.mode == "random":
        rng = np.random.default_rng(cfg.seed)
        picks = rng.choice(len(q), size=min(cfg.t_theta, len(q)), replace=False)
    elif cfg.mode == "topk":
        picks = np.argsort(-q, kind="stable")[:cfg.t_theta]
    else:
        picks = []
        work = q.copy()
        while len(picks) < cfg.t_theta and len(work):
            i = int(np.argmax(work))
            if work[i] < cfg.q_theta:
                break
            picks.append(i)
            r = _radius_of(radii, int(sem[i]), cfg)
            work[np.sum((pos - pos[i]) ** 2, axis=1) <= r * r] = 0.0
    picks = np.asarray(picks, dtype=np.intp)
    return CenterCandidates(picks, pos[picks], q[picks], sem[picks].astype(np.int64))


def associate_candidates_to_gt(cand_positions, gt_centers, gt_radii) -> list[int | None]:
    """Nearest ground-truth center within that instance's class radius; one candidate per GT."""
    cp = np.asarray(cand_positions, dtype=float).reshape(-1, 3)
    gc = np.asarray(gt_centers, dtype=float).reshape(-1, 3)
    out: list[int | None] = [None] * len(cp)
    if len(cp) == 0 or len(gc) == 0:
        return out
    d = np.linalg.norm(cp[:, None, :] - gc[None], axis=2)
    nearest = np.argmin(d, axis=1)
    best: dict[int, int] = {}
    for t, g in enumerate(nearest):
        if d[t, g] > gt_radii[g]:
            continue
        if g not in best or d[t, g] < d[best[g], g]:
            best[int(g)] = t
    for g, t in best.items():
        out[t] = g
    return out


# --- per-block prediction --------------------------------------------------------


@dataclass
class InferenceConfig:
    n_points: int = 4096
    cube: float = 1.0
    stride: float = 0.5
    min_points: int = 10
    mask_threshold: float = 0.5
    merge_threshold: float = 0.5
    use_size: bool = True
    seed: int = 0
    selection: SelectionConfig = field(default_factory=SelectionConfig)


@dataclass
class BlockInstance:
    points: np.ndarray      # sorted global point indices
    cls: int
    box: Aabb
    confidence: float


@dataclass
class BlockPrediction:
    block: Block
    heatmap: np.ndarray         # per block point
    semantics: np.ndarray       # per block point
    candidates: CenterCandidates
    instances: list[BlockInstance]


def fixed_context(groups: SizeGroupTable) -> np.ndarray:
    """Context extents used when size prediction is disabled."""
    return groups.sizes.mean(axis=0)


def predict_block(params: M.ModelParams, scene: Scene, block: Block, radii: ClassRadiusTable,
                  groups: SizeGroupTable, cfg: InferenceConfig, block_seed: int = 0
                  ) -> BlockPrediction:
    blk = sample_points(block, cfg.n_points, seed=block_seed)
    feats = build_features(blk, scene)
    pos = scene.positions[blk.sampled]
    bb = M.backbone_forward(feats, M.neighbor_table(pos, params.config), params)
    q = M.center_head(bb, params).data
    sem = np.argmax(M.semantic_head(bb, params).data, axis=1)
    sel = cfg.selection
    if sel.mode == "random":
        sel = SelectionConfig(sel.q_theta, sel.t_theta, sel.mode, sel.uniform_radius,
                              seed=sel.seed + block_seed)
    cands = select_centers(q, pos, sem, radii, sel)

    # propagate sampled predictions to every point of the block
    nn = cKDTree(pos).query(scene.positions[block.indices])[1]
    heat_full, sem_full = q[nn], sem[nn]
    instances: list[BlockInstance] = []
    if len(cands):
        if cfg.use_size:
            k_star = np.argmax(M.size_head(bb, cands.indices, params).data, axis=1)
            extents = groups.sizes[np.minimum(k_star, groups.k - 1)]
        else:
            extents = np.tile(fixed_context(groups), (len(cands), 1))
        boxes = M.box_head(bb, pos, cands.indices, extents, params).corners
        masks = M.mask_head(bb, pos, cands.indices, boxes, params).data > cfg.mask_threshold
        for t in range(len(cands)):
            member = masks[t][nn]
            if member.sum() < cfg.min_points:
                continue
            labels = sem_full[member]
            labels = labels[labels > 0]
            if len(labels) == 0:
                continue
            cls = int(np.bincount(labels).argmax())
            instances.append(BlockInstance(np.sort(block.indices[member]), cls,
                                           Aabb.canonical(boxes.data[t]),
                                           float(cands.values[t])))
    return BlockPrediction(block, heat_full, sem_full, cands, instances)


# --- merging -----------------------------------------------------------------------


@dataclass
class SceneInstance:
    points: np.ndarray
    cls: int
    box: Aabb
    confidence: float
    votes: list[float] = field(default_factory=list)


def resolve_ownership(instances: list[SceneInstance], n_points: int) -> list[SceneInstance]:
    """Give each point to its most confident claimant (lowest index on ties); drop empties."""
    owner = np.full(n_points, -1)
    order = sorted(range(len(instances)), key=lambda j: (-instances[j].confidence, j))
    for j in order:
        pts = instances[j].points
        free = pts[owner[pts] == -1]
        owner[free] = j
    out = []
    for j, inst in enumerate(instances):
        pts = np.flatnonzero(owner == j)
        if len(pts):
            out.append(SceneInstance(pts, inst.cls, inst.box, inst.confidence, list(inst.votes)))
    return out


def block_merge(per_block: list[list[BlockInstance]], n_points: int,
                threshold: float = 0.5) -> list[SceneInstance]:
    """Stitch block instances (blocks in origin order) into scene instances.

    A block instance joins the same-class scene instance from an earlier
    block with which it shares the most points, when the shared count exceeds
    ``threshold`` of either instance's size. Otherwise it opens a new scene
    instance. A final ownership pass makes point sets disjoint.
    """
    merged: list[SceneInstance] = []
    sets: list[set] = []
    for insts in per_block:
        earlier = len(merged)
        for inst in insts:
            best, best_ov = -1, 0
            pts = set(inst.points.tolist())
            for j in range(earlier):
                if merged[j].cls != inst.cls:
                    continue
                ov = len(sets[j] & pts)
                if ov > best_ov:
                    best, best_ov = j, ov
            if best >= 0 and (best_ov / len(pts) > threshold
                              or best_ov / len(sets[best]) > threshold):
                tgt = merged[best]
                sets[best] |= pts
                tgt.points = np.array(sorted(sets[best]))
                tgt.box = tgt.box.union(inst.box)
                tgt.votes.append(inst.confidence)
                tgt.confidence = float(np.mean(tgt.votes))
            else:
                merged.append(SceneInstance(inst.points.copy(), inst.cls, inst.box,
                                            inst.confidence, [inst.confidence]))
                sets.append(pts)
    return resolve_ownership(merged, n_points)


@dataclass
class SceneResult:
    instances: list[SceneInstance]
    blocks: list[BlockPrediction]
    heatmap: np.ndarray       # per scene point, max over covering blocks


def segment_scene(params: M.ModelParams, scene: Scene, radii: ClassRadiusTable,
                  groups: SizeGroupTable, cfg: InferenceConfig | None = None) -> SceneResult:
    """Slice, predict each cube, merge."""
    cfg = cfg or InferenceConfig()
    blocks = slice_into_cubes(scene, cfg.cube, cfg.stride)
    preds = [predict_block(params, scene, b, radii, groups, cfg, block_seed=cfg.seed * 7919 + k)
             for k, b in enumerate(blocks)]
    heat = np.zeros(len(scene))
    for p in preds:
        np.maximum.at(heat, p.block.indices, p.heatmap)
    instances = block_merge([p.instances for p in preds], len(scene), cfg.merge_threshold)
    return SceneResult(instances, preds, heat)


def scene_heatmap(params: M.ModelParams, scene: Scene, cfg: InferenceConfig | None = None
                  ) -> np.ndarray:
    """Predicted center heatmap per scene point (max over covering cubes), no selection."""
    cfg = cfg or InferenceConfig()
    heat = np.zeros(len(scene))
    for k, block in enumerate(slice_into_cubes(scene, cfg.cube, cfg.stride)):
        blk = sample_points(block, cfg.n_points, seed=cfg.seed * 7919 + k)
        pos = scene.positions[blk.sampled]
        bb = M.backbone_forward(build_features(blk, scene),
                                M.neighbor_table(pos, params.config), params)
        q = M.center_head(bb, params).data
        nn = cKDTree(pos).query(scene.positions[block.indices])[1]
        np.maximum.at(heat, block.indices, q[nn])
    return heat


# --- files -------------------------------------------------------------------------


def write_instances(path, instances: list[SceneInstance]) -> None:
    """One row per instance: class confidence xmin ymin zmin xmax ymax zmax idx..."""
    lines = []
    for inst in instances:
        head = [str(inst.cls), repr(float(inst.confidence)),
                *(repr(float(v)) for v in inst.box.as_vector())]
        lines.append(" ".join(head + [str(int(i)) for i in inst.points]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_instances(path) -> list[SceneInstance]:
    out = []
    for lineno, row in enumerate(Path(path).read_text().splitlines(), start=1):
        if not row.strip():
            continue
        f = row.split()
        if len(f) < 8:
            raise ValueError(f"{path}:{lineno}: expected class, confidence, 6 corners, indices")
        try:
            box = Aabb(np.array(f[2:5], dtype=float), np.array(f[5:8], dtype=float))
            pts = np.array(f[8:], dtype=np.int64)
            conf = float(f[1])
            out.append(SceneInstance(pts, int(f[0]), box, conf, [conf]))
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: {err}") from None
    return out


def gt_instances(scene: Scene) -> list[SceneInstance]:
    """Ground-truth instances of a labeled scene, in the prediction record shape."""
    out = []
    for t in scene.instance_ids():
        pts = np.flatnonzero(scene.instance_id == t)
        out.append(SceneInstance(pts, scene.instance_class(t),
                                 Aabb.from_points(scene.positions[pts]), 1.0, [1.0]))
    return out
