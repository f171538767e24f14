"""Point-feature backbone and the center, semantic, size, box and mask heads.

Blocks in a batch share one point count ``n``; their rows are stacked into a
single ``(B*n, C)`` matrix so every per-point layer is one matmul.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ModelConfig:
    in_dim: int = 9
    point_widths: tuple[int, ...] = (64, 128)
    knn: int = 16
    knn_dilations: tuple[int, ...] = (1,)
    fuse_width: int = 128
    global_width: int = 512
    feat_width: int = 128
    center_widths: tuple[int, ...] = (128, 64, 32)
    semantic_hidden: int = 64
    n_classes: int = 4
    k_groups: int = 6
    size_hidden: int = 128
    box_local: tuple[int, ...] = (64, 128, 256)
    box_after: tuple[int, ...] = (512, 128)
    mask_reduce: int = 64
    mask_widths: tuple[int, ...] = (64, 32)
    box_info_scale: float = 4.0
    context_scale: float = 1.0
    rel_scale: float = 1.0
    init_seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        out = {}
        for k, v in d.items():
            if k in known:
                out[k] = tuple(v) if isinstance(v, list) else v
        return cls(**out)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items() if t.grad is not None}

    def save(self, path, meta: dict | None = None) -> None:
        ad.save_checkpoint(path, self.arrays(), {"model": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        arrays, meta = ad.load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta.get("model", {}))
        return cls(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}), meta


def _mlp_shapes(prefix: str, widths, in_dim: int) -> list[tuple[str, int, int]]:
    out = []
    for i, w in enumerate(widths):
        out.append((f"{prefix}.{i}", in_dim, w))
        in_dim = w
    return out


def layer_shapes(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, fan_in, fan_out) of every affine layer."""
    c = cfg
    pw = c.point_widths[-1]
    shapes = _mlp_shapes("bb.point", c.point_widths, c.in_dim)
    shapes += [("bb.fuse", (1 + len(c.knn_dilations)) * pw, c.fuse_width), ("bb.global", c.fuse_width, c.global_width),
               ("bb.out", c.fuse_width + c.global_width, c.feat_width)]
    shapes += _mlp_shapes("center", (*c.center_widths, 1), c.feat_width)
    shapes += _mlp_shapes("sem", (c.semantic_hidden, c.n_classes), c.feat_width)
    shapes += _mlp_shapes("size", (c.size_hidden, c.k_groups), c.feat_width + c.global_width)
    shapes += _mlp_shapes("box.local", c.box_local, 3 + c.feat_width)
    shapes += _mlp_shapes("box.head", (*c.box_after, 6), c.box_local[-1] + c.global_width)
    shapes += [("mask.point", c.feat_width, c.mask_reduce),
               ("mask.global", c.global_width, c.mask_reduce)]
    shapes += _mlp_shapes("mask.head", (*c.mask_widths, 1), 2 * c.mask_reduce + 6)
    return shapes


# final layer of each output head starts at zero
_ZERO_INIT = ("center.", "size.", "box.head.", "mask.head.")


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    shapes = layer_shapes(cfg)
    last = {}
    for name, _, _ in shapes:
        last[name.rsplit(".", 1)[0]] = name
    tensors = {}
    for name, fan_in, fan_out in shapes:
        is_last = last[name.rsplit(".", 1)[0]] == name
        if is_last and name.startswith(_ZERO_INIT):
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        tensors[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        tensors[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=name + ".b")
    return ModelParams(cfg, tensors)


def _affine(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return x @ p[name + ".w"] + p[name + ".b"]


def _mlp(p: ModelParams, prefix: str, x: Tensor, n_layers: int, final_relu: bool = True) -> Tensor:
    for i in range(n_layers):
        x = _affine(p, f"{prefix}.{i}", x)
        if final_relu or i < n_layers - 1:
            x = ad.relu(x)
    return x


def knn_indices(positions: np.ndarray, k: int, dilations=(1,)) -> np.ndarray:
    """Neighbor table of shape (n, k * len(dilations)), one k-column slab per dilation.

    Slab d holds every d-th of the k*d nearest rows (self included). Short
    point sets pad with the nearest row.
    """
    pos = np.asarray(positions, dtype=float)
    widest = k * max(dilations)
    k_eff = min(widest, len(pos))
    _, idx = cKDTree(pos).query(pos, k=k_eff)
    idx = np.asarray(idx).reshape(len(pos), k_eff)
    if k_eff < widest:
        idx = np.concatenate([idx, np.repeat(idx[:, :1], widest - k_eff, axis=1)], axis=1)
    return np.concatenate([idx[:, :k * d:d] for d in dilations], axis=1)


def neighbor_table(positions, cfg: ModelConfig) -> np.ndarray:
    return knn_indices(positions, cfg.knn, cfg.knn_dilations)


@dataclass
class BackboneOutput:
    per_point: Tensor      # (B*n, F)
    global_feature: Tensor  # (B, G)
    n_blocks: int
    n_points: int

    def block_of(self, rows) -> np.ndarray:
        return np.asarray(rows) // self.n_points


def backbone_forward(features, knn, params: ModelParams, n_blocks: int = 1) -> BackboneOutput:
    """Shared point MLP, k-NN local max-pool, global max-pool, fused per-point features.

    ``knn`` holds row indices into the stacked batch.
    """
    cfg = params.config
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.data.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ad.ShapeError(f"backbone: expected (N, {cfg.in_dim}) features, got {x.shape}")
    m = x.shape[0]
    if m == 0 or m % n_blocks:
        raise ad.ShapeError(f"backbone: {m} rows cannot split into {n_blocks} blocks")
    n = m // n_blocks
    knn = np.asarray(knn)
    if knn.shape[0] != m:
        raise ad.ShapeError(f"backbone: knn table has {knn.shape[0]} rows for {m} points")
    h = _mlp(params, "bb.point", x, len(cfg.point_widths))
    k = cfg.knn
    if knn.shape[1] != k * len(cfg.knn_dilations):
        raise ad.ShapeError(f"backbone: knn table width {knn.shape[1]} does not match "
                            f"{len(cfg.knn_dilations)} scales of {k}")
    local = [ad.neighbor_max(h, knn[:, j * k:(j + 1) * k]) for j in range(len(cfg.knn_dilations))]
    h = ad.relu(_affine(params, "bb.fuse", ad.concat([h, *local])))
    g = ad.relu(_affine(params, "bb.global", h))
    glob = ad.max_over(ad.reshape(g, (n_blocks, n, cfg.global_width)), 1)
    rows = ad.repeat_rows(glob, n)
    feat = ad.relu(_affine(params, "bb.out", ad.concat([h, rows])))
    return BackboneOutput(feat, glob, n_blocks, n)


def center_head(bb: BackboneOutput, params: ModelParams) -> Tensor:
    """Per-point center probability, shape (B*n,)."""
    depth = len(params.config.center_widths) + 1
    logits = _mlp(params, "center", bb.per_point, depth, final_relu=False)
    return ad.reshape(ad.sigmoid(logits), (logits.shape[0],))


def semantic_head(bb: BackboneOutput, params: ModelParams) -> Tensor:
    return _mlp(params, "sem", bb.per_point, 2, final_relu=False)


def size_head(bb: BackboneOutput, cand_rows, params: ModelParams) -> Tensor:
    """Softmax over size groups for each candidate row, shape (T, K)."""
    cand_rows = np.asarray(cand_rows, dtype=np.intp)
    ctx = ad.concat([ad.gather_rows(bb.per_point, cand_rows),
                     ad.gather_rows(bb.global_feature, bb.block_of(cand_rows))])
    return ad.softmax(_mlp(params, "size", ctx, 2, final_relu=False))


@dataclass
class BoxOutput:
    corners: Tensor          # (T, 6) raw min/max corners in meters
    fallback: np.ndarray     # (T,) True where the neighborhood was empty


def box_neighborhoods(positions, cand_rows, extents, n_points: int, scale: float = 1.0):
    """Rows inside the axis-aligned box of ``extents`` centered at each candidate.

    Returns (rows, segment ids, fallback flags); segments are sorted.
    """
    positions = np.asarray(positions, dtype=float)
    rows_out, seg_out, fallback = [], [], []
    for t, (r, ext) in enumerate(zip(cand_rows, np.asarray(extents, dtype=float))):
        b = r // n_points
        blk = slice(b * n_points, (b + 1) * n_points)
        inside = np.all(np.abs(positions[blk] - positions[r]) <= scale * ext / 2, axis=1)
        rows = np.flatnonzero(inside) + b * n_points
        if len(rows) == 0:
            rows = np.array([r])
            fallback.append(True)
        else:
            fallback.append(False)
        rows_out.append(rows)
        seg_out.append(np.full(len(rows), t))
    return np.concatenate(rows_out), np.concatenate(seg_out), np.array(fallback)


def box_head(bb: BackboneOutput, positions, cand_rows, extents, params: ModelParams) -> BoxOutput:
    """Raw box corners for each candidate from its size-limited context and the global feature.

    ``positions`` are the stacked point coordinates in meters, ``extents``
    the per-candidate context size (the chosen size group).
    """
    cfg = params.config
    cand_rows = np.asarray(cand_rows, dtype=np.intp)
    positions = np.asarray(positions, dtype=float)
    rows, seg, fallback = box_neighborhoods(positions, cand_rows, extents, bb.n_points,
                                            cfg.context_scale)
    centers = positions[cand_rows]
    rel = Tensor((positions[rows] - centers[seg]) * cfg.rel_scale)
    local_in = ad.concat([rel, ad.gather_rows(bb.per_point, rows)])
    local = _mlp(params, "box.local", local_in, len(cfg.box_local))
    pooled = ad.segment_max(local, seg, len(cand_rows))
    ctx = ad.concat([pooled, ad.gather_rows(bb.global_feature, bb.block_of(cand_rows))])
    offsets = _mlp(params, "box.head", ctx, len(cfg.box_after) + 1, final_relu=False)
    corners = offsets + Tensor(np.tile(centers, (1, 2)))
    return BoxOutput(corners, fallback)


def mask_head(bb: BackboneOutput, positions, cand_rows, corners: Tensor,
              params: ModelParams) -> Tensor:
    """Mask probability of every point of the candidate's block, shape (T, n).

    Per point: reduced point feature, reduced global feature, and six signed
    distances to the faces of the candidate's box.
    """
    cfg = params.config
    n = bb.n_points
    cand_rows = np.asarray(cand_rows, dtype=np.intp)
    t_count = len(cand_rows)
    blocks = bb.block_of(cand_rows)
    rows = (blocks[:, None] * n + np.arange(n)[None, :]).reshape(-1)
    pf = ad.relu(_affine(params, "mask.point", bb.per_point))
    gf = ad.relu(_affine(params, "mask.global", bb.global_feature))
    pos = Tensor(np.tile(np.asarray(positions, dtype=float)[rows], (1, 2)))
    box_rows = ad.gather_rows(corners, np.repeat(np.arange(t_count), n))
    sign = np.array([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
    # (p - min, max - p)
    info = (pos - box_rows) * Tensor(sign * cfg.box_info_scale)
    x = ad.concat([ad.gather_rows(pf, rows), ad.gather_rows(gf, np.repeat(blocks, n)), info])
    logits = _mlp(params, "mask.head", x, len(cfg.mask_widths) + 1, final_relu=False)
    return ad.reshape(ad.sigmoid(logits), (t_count, n))


def toy_config(**overrides) -> ModelConfig:
    """Narrow widths for CPU-scale synthetic experiments."""
    base = dict(point_widths=(32, 64), knn=16, knn_dilations=(1, 4), fuse_width=64, global_width=128, feat_width=64,
                center_widths=(64, 32, 16), semantic_hidden=32, size_hidden=64,
                box_local=(32, 64, 128), box_after=(128, 64), mask_reduce=32, mask_widths=(32, 16))
    base.update(overrides)
    return ModelConfig(**base)
