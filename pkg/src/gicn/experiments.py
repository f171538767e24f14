"""Toy-corpus experiment harness shared by the scripts and the end-to-end tests.

The toy setting keeps the default architecture and losses but narrows the
layer widths, samples 512 points per cube and visits three random cubes per
training scene each epoch, so a run fits a few CPU minutes.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .dataset import Scene, SceneConfig, generate_scene, sample_points, slice_into_cubes, \
    build_features
from .evaluation import EvalReport
from .geometry import Aabb
from .groundtruth import (ClassRadiusTable, SizeGroupTable, compute_class_radii,
                          compute_size_groups, gt_heatmap)
from .inference import select_centers
from .training import RunLog, TrainConfig, make_block_samples, train, validate

TOY_SCENES = 200
TOY_HELD_OUT = 40

TRAIN_VARIANTS = {
    "default": {},
    "no-focal": {"focal": False},
    "no-size": {"use_size": False},
}
# inference-only variants reuse the default model
INFERENCE_VARIANTS = {
    "random-centers": {"selection_mode": "random"},
    "topk-centers": {"selection_mode": "topk"},
    "uniform-radius": {"uniform_radius": True},
}
VARIANTS = (*TRAIN_VARIANTS, *INFERENCE_VARIANTS)


@dataclass
class ToyCorpus:
    train: list[Scene]
    test: list[Scene]
    radii: ClassRadiusTable
    groups: SizeGroupTable


def toy_corpus(n_scenes: int = TOY_SCENES, held_out: int = TOY_HELD_OUT,
               config: SceneConfig | None = None) -> ToyCorpus:
    """Scenes with seeds 0..n-1; the last ``held_out`` are never trained on."""
    config = config or SceneConfig()
    scenes = [generate_scene(config, s) for s in range(n_scenes)]
    train_set, test_set = scenes[:n_scenes - held_out], scenes[n_scenes - held_out:]
    return ToyCorpus(train_set, test_set, compute_class_radii(train_set),
                     compute_size_groups(train_set))


def toy_train_config(seed: int = 0, **overrides) -> TrainConfig:
    base = dict(epochs=40, n_points=512, warmup=2, blocks_per_scene=3, seed=seed,
                val_every=0, model=M.toy_config())
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class RunResult:
    variant: str
    seed: int
    params: M.ModelParams
    config: TrainConfig
    log: RunLog
    seconds: float
    scores: dict[str, EvalReport] = field(default_factory=dict)


def train_variant(corpus: ToyCorpus, variant: str, seed: int, run_dir=None,
                  **overrides) -> RunResult:
    if variant not in TRAIN_VARIANTS:
        raise ValueError(f"{variant!r} is not a trained variant")
    cfg = toy_train_config(seed, **{**TRAIN_VARIANTS[variant], **overrides})
    t0 = time.process_time()
    params, log = train(corpus.train, [], cfg, corpus.radii, corpus.groups, run_dir)
    seconds = time.process_time() - t0
    cfg = dataclasses.replace(cfg, model=params.config)
    return RunResult(variant, seed, params, cfg, log, seconds)


def score(run: RunResult, scenes: list[Scene], corpus: ToyCorpus,
          variant: str | None = None) -> EvalReport:
    """Held-out metrics, optionally under an inference-only ablation."""
    cfg = run.config
    if variant is not None and variant in INFERENCE_VARIANTS:
        cfg = dataclasses.replace(cfg, **INFERENCE_VARIANTS[variant])
    return validate(run.params, scenes, cfg, corpus.radii, corpus.groups)


def heatmap_mae(params: M.ModelParams, scenes: list[Scene], n_points: int = 512,
                seed: int = 0, sigma_g: float = 0.4) -> float:
    """Mean |Q - GT heatmap| over the sampled points of every cube of ``scenes``."""
    errs = []
    for s, scene in enumerate(scenes):
        for k, block in enumerate(slice_into_cubes(scene)):
            blk = sample_points(block, n_points, seed=seed * 7919 + s * 1009 + k)
            pos = scene.positions[blk.sampled]
            bb = M.backbone_forward(build_features(blk, scene),
                                    M.neighbor_table(pos, params.config), params)
            q = M.center_head(bb, params).data
            gt = gt_heatmap(pos, scene.instance_id[blk.sampled], sigma_g).values
            errs.append(np.abs(q - gt))
    return float(np.mean(np.concatenate(errs)))


@dataclass
class BlockDiagnostics:
    semantic_accuracy: float
    size_accuracy_large: float      # on instances of the largest size group
    corner_error: float             # mean |corner - GT corner| of the emitted (canonical) box, m
    raw_corner_error: float         # same on the raw head output, before min/max ordering
    mask_iou: float
    candidates_per_block: np.ndarray


def block_diagnostics(run: RunResult, scenes: list[Scene], corpus: ToyCorpus,
                      seed: int = 1) -> BlockDiagnostics:
    """Per-head quality on every cube of ``scenes``, heads fed at the GT center points."""
    params, cfg = run.params, dataclasses.replace(run.config, seed=seed)
    groups = corpus.groups
    large = int(np.argmax(np.prod(groups.sizes, axis=1)))
    hits = total = 0
    size_ok, corner_err, raw_err, ious, counts = [], [], [], [], []
    for scene_blocks in make_block_samples(scenes, cfg, groups):
        for b in scene_blocks:
            bb = M.backbone_forward(b.features, b.knn, params)
            q = M.center_head(bb, params).data
            sem = np.argmax(M.semantic_head(bb, params).data, axis=1)
            hits += int(np.sum(sem == b.semantic))
            total += len(sem)
            valid = [p for p in b.portions if p.valid]
            if not valid:
                continue
            counts.append(len(select_centers(q, b.positions, sem, corpus.radii,
                                             cfg.selection(corpus.radii))))
            rows = np.array([p.center_row for p in valid])
            k_star = np.argmax(M.size_head(bb, rows, params).data, axis=1)
            for p, k in zip(valid, k_star):
                if p.group == large:
                    size_ok.append(k == p.group)
            boxes = M.box_head(bb, b.positions, rows, groups.sizes[k_star], params).corners
            gt_box = np.stack([p.box for p in valid])
            emitted = np.stack([Aabb.canonical(c).as_vector() for c in boxes.data])
            corner_err.append(np.abs(emitted - gt_box).ravel())
            raw_err.append(np.abs(boxes.data - gt_box).ravel())
            masks = M.mask_head(bb, b.positions, rows, boxes, params).data > 0.5
            for p, m in zip(valid, masks):
                ious.append(np.sum(m & p.mask) / np.sum(m | p.mask))
    return BlockDiagnostics(hits / total, float(np.mean(size_ok)),
                            float(np.mean(np.concatenate(corner_err))),
                            float(np.mean(np.concatenate(raw_err))), float(np.mean(ious)),
                            np.array(counts))


class Lab:
    """Lazily trains and scores toy runs, caching each (variant, seed) once."""

    def __init__(self, corpus: ToyCorpus | None = None, run_root=None, **overrides):
        self.corpus = corpus or toy_corpus()
        self.run_root = run_root
        self.overrides = overrides
        self._runs: dict[tuple[str, int], RunResult] = {}
        self._scores: dict[tuple[str, int], EvalReport] = {}

    def run(self, variant: str, seed: int) -> RunResult:
        trained = variant if variant in TRAIN_VARIANTS else "default"
        key = (trained, seed)
        if key not in self._runs:
            run_dir = None if self.run_root is None else f"{self.run_root}/{trained}-{seed}"
            self._runs[key] = train_variant(self.corpus, trained, seed, run_dir, **self.overrides)
        return self._runs[key]

    def score(self, variant: str, seed: int) -> EvalReport:
        key = (variant, seed)
        if key not in self._scores:
            self._scores[key] = score(self.run(variant, seed), self.corpus.test, self.corpus,
                                      variant)
        return self._scores[key]

    def median(self, variant: str, seeds, metric: str = "m_prec") -> float:
        return float(np.median([getattr(self.score(variant, s), metric) for s in seeds]))
