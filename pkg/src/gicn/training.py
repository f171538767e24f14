"""End-to-end training: block targets, joint loss, Adam with step-halving learning rate."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from .dataset import Scene, build_features, sample_points, slice_into_cubes
from .evaluation import evaluate
from .groundtruth import ClassRadiusTable, SizeGroupTable, gt_heatmap
from .inference import (InferenceConfig, SelectionConfig, associate_candidates_to_gt,
                        fixed_context, gt_instances, segment_scene, select_centers)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.002
    halve_every: int = 20
    batch_size: int = 4
    seed: int = 0
    n_points: int = 4096
    cube: float = 1.0
    stride: float = 0.5
    warmup: int = 5
    blocks_per_scene: int | None = None
    min_gt_points: int = 10
    use_size: bool = True
    focal: bool = True
    selection_mode: str = "greedy"
    uniform_radius: bool = False
    val_every: int = 1
    keep_checkpoints: int | None = None
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.halve_every < 1 or self.n_points < 1:
            raise ValueError("epochs, batch size, halve_every and n_points must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.warmup < 0:
            raise ValueError("warm-up must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = M.ModelConfig.from_dict(d.pop("model", {}))
        loss = L.LossConfig(**d.pop("loss", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(model=model, loss=loss, **d)

    def loss_config(self) -> L.LossConfig:
        if self.focal:
            return self.loss
        return dataclasses.replace(self.loss, alpha=1.0, gamma=0.0)

    def selection(self, radii: ClassRadiusTable) -> SelectionConfig:
        uniform = radii.global_radius if self.uniform_radius else None
        return SelectionConfig(mode=self.selection_mode, uniform_radius=uniform, seed=self.seed)

    def inference(self, radii: ClassRadiusTable) -> InferenceConfig:
        return InferenceConfig(n_points=self.n_points, cube=self.cube, stride=self.stride,
                               use_size=self.use_size, seed=self.seed,
                               selection=self.selection(radii))


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * 0.5 ** (epoch // cfg.halve_every)


# --- training targets ------------------------------------------------------------


@dataclass
class Portion:
    """The part of one ground-truth instance that falls in a sampled block."""
    center_row: int
    cls: int
    group: int
    box: np.ndarray
    mask: np.ndarray
    valid: bool


@dataclass
class BlockSample:
    positions: np.ndarray
    features: np.ndarray
    knn: np.ndarray
    semantic: np.ndarray
    heat: np.ndarray
    focal_positive: np.ndarray
    portions: list[Portion]


def make_block_sample(scene: Scene, block, n_points: int, seed: int, model: M.ModelConfig,
                      groups: SizeGroupTable, min_points: int = 10,
                      sigma_g: float = 0.4) -> BlockSample:
    blk = sample_points(block, n_points, seed)
    idx = blk.sampled
    pos = scene.positions[idx]
    inst = scene.instance_id[idx]
    hm = gt_heatmap(pos, inst, sigma_g)
    portions = []
    for t, spec in hm.centers.items():
        mask = inst == t
        members = pos[mask]
        lo, hi = members.min(axis=0), members.max(axis=0)
        cls = scene.instance_class(t)
        valid = (len(np.unique(idx[mask])) >= min_points and bool(np.all(hi > lo))
                 and cls in groups.class_to_group)
        portions.append(Portion(spec.center_index, cls, groups.class_to_group.get(cls, 0),
                                np.concatenate([lo, hi]), mask, valid))
    return BlockSample(pos, build_features(blk, scene), M.neighbor_table(pos, model),
                       scene.semantic_id[idx], hm.values, hm.focal_positive, portions)


def make_block_samples(scenes: list[Scene], cfg: TrainConfig,
                       groups: SizeGroupTable) -> list[list[BlockSample]]:
    """Per scene, one fixed sample per sliding-window cube."""
    out = []
    for s, scene in enumerate(scenes):
        blocks = slice_into_cubes(scene, cfg.cube, cfg.stride)
        out.append([make_block_sample(scene, b, cfg.n_points, cfg.seed * 1_000_003 + s * 1009 + k,
                                      cfg.model, groups, cfg.min_gt_points,
                                      cfg.loss.sigma_g)
                    for k, b in enumerate(blocks)])
    return out


# --- one step ----------------------------------------------------------------------


def forward_loss(params: M.ModelParams, batch: list[BlockSample], cfg: TrainConfig,
                 radii: ClassRadiusTable, groups: SizeGroupTable, epoch: int) -> L.LossReport:
    """Joint loss of a batch of equally sized blocks (call inside a Tape)."""
    n = len(batch[0].positions)
    nb = len(batch)
    pos = np.concatenate([b.positions for b in batch])
    feats = np.concatenate([b.features for b in batch])
    knn = np.concatenate([b.knn + i * n for i, b in enumerate(batch)])
    lcfg = cfg.loss_config()

    bb = M.backbone_forward(feats, knn, params, nb)
    q = M.center_head(bb, params)
    sem_logits = M.semantic_head(bb, params)
    terms = {
        "center": L.center_focal_loss(q, np.concatenate([b.focal_positive for b in batch]), lcfg),
        "semantic": L.semantic_ce_loss(sem_logits, np.concatenate([b.semantic for b in batch])),
    }

    rows, assigned = [], []
    sem_pred = np.argmax(sem_logits.data, axis=1)
    sel = cfg.selection(radii)
    for i, b in enumerate(batch):
        valid = [p for p in b.portions if p.valid]
        if not valid:
            continue
        if epoch < cfg.warmup:
            rows += [i * n + p.center_row for p in valid]
            assigned += valid
            continue
        blk = slice(i * n, (i + 1) * n)
        cands = select_centers(q.data[blk], b.positions, sem_pred[blk], radii, sel)
        centers = np.stack([b.positions[p.center_row] for p in valid])
        gt_r = np.array([radii.lookup(p.cls) for p in valid])
        for t, g in enumerate(associate_candidates_to_gt(cands.positions, centers, gt_r)):
            if g is not None:
                rows.append(i * n + int(cands.indices[t]))
                assigned.append(valid[g])

    if rows:
        rows = np.array(rows)
        gt_box = np.stack([p.box for p in assigned])
        if cfg.use_size:
            probs = M.size_head(bb, rows, params)
            gt_group = np.array([p.group for p in assigned])
            terms["size"] = L.size_ce_loss(probs, gt_group)
            extents = groups.sizes[gt_group]
        else:
            extents = np.tile(fixed_context(groups), (len(rows), 1))
        boxes = M.box_head(bb, pos, rows, extents, params).corners
        terms["bound"] = L.bound_loss(boxes, gt_box, lcfg)
        terms["iou"] = L.giou_loss(boxes, gt_box)
        masks = M.mask_head(bb, pos, rows, boxes, params)
        terms["mask"] = L.mask_focal_loss(masks, np.stack([p.mask for p in assigned]), lcfg)
    return L.total_loss(terms, lcfg, assignment=list(zip(np.asarray(rows).tolist(), assigned)))


# --- loop ------------------------------------------------------------------------


LOG_FIELDS = ["epoch", "lr", "total", *L.TERMS, "val_mprec", "val_mrec", "val_ap50"]


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _batches(samples: list[list[BlockSample]], cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch])
    pool = []
    for scene_blocks in samples:
        if cfg.blocks_per_scene is not None and len(scene_blocks) > cfg.blocks_per_scene:
            pick = rng.choice(len(scene_blocks), cfg.blocks_per_scene, replace=False)
            pool += [scene_blocks[k] for k in sorted(pick)]
        else:
            pool += scene_blocks
    order = rng.permutation(len(pool))
    for s in range(0, len(order), cfg.batch_size):
        yield [pool[k] for k in order[s:s + cfg.batch_size]]


def validate(params, scenes: list[Scene], cfg: TrainConfig, radii, groups):
    icfg = cfg.inference(radii)
    preds = [segment_scene(params, s, radii, groups, icfg).instances for s in scenes]
    return evaluate(preds, [gt_instances(s) for s in scenes])


def train(train_scenes: list[Scene], val_scenes: list[Scene], cfg: TrainConfig,
          radii: ClassRadiusTable, groups: SizeGroupTable, run_dir=None
          ) -> tuple[M.ModelParams, RunLog]:
    if not train_scenes:
        raise ValueError("no training scenes")
    model_cfg = dataclasses.replace(cfg.model, k_groups=groups.k, init_seed=cfg.seed)
    cfg = dataclasses.replace(cfg, model=model_cfg)
    params = M.init_params(model_cfg)
    state = ad.AdamState()
    samples = make_block_samples(train_scenes, cfg, groups)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    runlog = RunLog()
    best_ap = -math.inf
    written: list[Path] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = {k: 0.0 for k in ["total", *L.TERMS]}
        steps = 0
        for batch in _batches(samples, cfg, epoch):
            with ad.Tape() as tape:
                report = forward_loss(params, batch, cfg, radii, groups, epoch)
            params.zero_grad()
            tape.backward(report.total)
            ad.adam_step(params.tensors, params.grads(), state, lr)
            for k, v in report.as_row().items():
                sums[k] += v
            steps += 1
        row = {"epoch": epoch, "lr": lr, **{k: v / max(steps, 1) for k, v in sums.items()},
               "val_mprec": float("nan"), "val_mrec": float("nan"), "val_ap50": float("nan")}
        is_val = val_scenes and cfg.val_every and (
            (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1)
        if is_val:
            rep = validate(params, val_scenes, cfg, radii, groups)
            row.update(val_mprec=rep.m_prec, val_mrec=rep.m_rec, val_ap50=rep.m_ap)
        runlog.rows.append(row)
        log.info("epoch %d lr %.5f loss %.4f val AP %.3f", epoch, lr, row["total"], row["val_ap50"])
        if run_dir is not None:
            path = run_dir / f"epoch_{epoch}.ckpt"
            params.save(path, {"epoch": epoch, "train": cfg.to_dict()})
            written.append(path)
            if cfg.keep_checkpoints is not None:
                while len(written) > cfg.keep_checkpoints:
                    written.pop(0).unlink(missing_ok=True)
            if is_val and row["val_ap50"] > best_ap:
                best_ap = row["val_ap50"]
                shutil.copyfile(path, run_dir / "best.ckpt")
            runlog.write_csv(run_dir / "log.csv")
    return params, runlog
