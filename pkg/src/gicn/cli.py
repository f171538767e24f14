"""Command-line entry point: ``gicn <command> [flags]``.

Failures print a single JSON line ``{"error": <kind>, "message": <text>}`` on
stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import model as M
from .dataset import (SceneConfig, generate_scene, instance_palette, read_scene, write_ply,
                      write_scene)
from .evaluation import evaluate
from .groundtruth import compute_class_radii, compute_size_groups, gt_heatmap, load_stats, save_stats
from .inference import (InferenceConfig, gt_instances, read_instances, scene_heatmap, segment_scene,
                        write_instances)
from .training import TrainConfig, train, validate

RUN_DIR_ENV = "GICN_RUN_DIR"
SCENE_SUFFIX = ".scn.txt"
VARIANTS = ("no-size", "no-focal", "random-centers", "topk-centers", "uniform-radius")
EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    """A failure reported to the user as ``kind: message``."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("UsageError", f"{self.prog}: {message}")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("MissingFile", f"{what} not found: {path}")
    return p


def _scene_paths(spec: str) -> list[Path]:
    p = _existing(spec, "scene set")
    paths = sorted(p.glob(f"*{SCENE_SUFFIX}")) if p.is_dir() else [p]
    if not paths:
        raise CliError("MissingFile", f"no {SCENE_SUFFIX} files in {spec}")
    return paths


def _load_scenes(spec: str):
    return [read_scene(p) for p in _scene_paths(spec)]


def _read_json(path: str, what: str) -> dict:
    try:
        doc = json.loads(_existing(path, what).read_text())
    except json.JSONDecodeError as err:
        raise CliError("MalformedConfig", f"{path}: {err}") from None
    if not isinstance(doc, dict):
        raise CliError("MalformedConfig", f"{path}: expected a JSON object")
    return doc


def _train_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        return TrainConfig.from_dict(_read_json(path, "config"))
    except (TypeError, ValueError) as err:
        raise CliError("MalformedConfig", f"{path}: {err}") from None


def _run_dir(arg: str | None, name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(RUN_DIR_ENV, "runs")) / name


def _load_checkpoint(path: str):
    params, meta = M.ModelParams.load(_existing(path, "checkpoint"))
    cfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else TrainConfig()
    return params, cfg


# --- commands ----------------------------------------------------------------------


def cmd_synth(args) -> None:
    try:
        cfg = SceneConfig.from_dict(_read_json(args.config, "config")) if args.config else SceneConfig()
    except (TypeError, ValueError) as err:
        raise CliError("MalformedConfig", f"{args.config}: {err}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        seed = args.seed + k
        write_scene(generate_scene(cfg, seed), out / f"scene_{seed:05d}{SCENE_SUFFIX}")
    print(f"wrote {args.count} scenes to {out}")


def cmd_stats(args) -> None:
    scenes = _load_scenes(args.scenes)
    radii, groups = compute_class_radii(scenes), compute_size_groups(scenes, args.k)
    save_stats(args.out, radii, groups)
    print(f"stats over {len(scenes)} scenes: {groups.k} size groups -> {args.out}")


def _train(args, cfg: TrainConfig, name: str):
    radii, groups = load_stats(_existing(args.stats, "stats"))
    run_dir = _run_dir(args.run_dir, name)
    params, runlog = train(_load_scenes(args.scenes), _load_scenes(args.val) if args.val else [],
                           cfg, radii, groups, run_dir)
    return params, runlog, run_dir, radii, groups


def cmd_train(args) -> None:
    cfg = _train_config(args.config)
    _, runlog, run_dir, _, _ = _train(args, cfg, args.name)
    last = runlog.rows[-1]
    print(f"trained {cfg.epochs} epochs -> {run_dir} (final loss {last['total']:.4f}, "
          f"val AP@50 {last['val_ap50']:.3f})")


def cmd_infer(args) -> None:
    params, tcfg = _load_checkpoint(args.checkpoint)
    radii, groups = load_stats(_existing(args.stats, "stats"))
    scene = read_scene(_existing(args.scene, "scene"))
    icfg = tcfg.inference(radii)
    if args.n_points is not None:
        icfg = dataclasses.replace(icfg, n_points=args.n_points)
    result = segment_scene(params, scene, radii, groups, icfg)
    write_instances(args.out, result.instances)
    ply = Path(args.ply) if args.ply else Path(args.out).with_suffix(".ply")
    colors = np.full((len(scene), 3), 0.5)
    palette = instance_palette(len(result.instances))
    for j, inst in enumerate(result.instances):
        colors[inst.points] = palette[j]
    write_ply(ply, scene.positions, colors)
    print(f"{len(result.instances)} instances -> {args.out}, {ply}")


def cmd_eval(args) -> None:
    preds = sorted(_existing(args.pred, "predictions").glob("*.inst")) \
        if Path(args.pred).is_dir() else [Path(args.pred)]
    gts = _scene_paths(args.gt)
    if len(preds) != len(gts):
        raise CliError("MismatchedInputs", f"{len(preds)} prediction files for {len(gts)} scenes")
    report = evaluate([read_instances(p) for p in preds],
                      [gt_instances(read_scene(g)) for g in gts])
    print(report.table())
    if args.out:
        report.write_csv(args.out)


def cmd_export_heatmap(args) -> None:
    params, tcfg = _load_checkpoint(args.checkpoint)
    scene = read_scene(_existing(args.scene, "scene"))
    icfg = InferenceConfig(n_points=args.n_points or tcfg.n_points, cube=tcfg.cube,
                           stride=tcfg.stride, seed=tcfg.seed)
    pred = scene_heatmap(params, scene, icfg)
    gt = gt_heatmap(scene.positions, scene.instance_id, tcfg.loss.sigma_g).values
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "instance_id", "pred", "gt"])
        for p, i, q, g in zip(scene.positions, scene.instance_id, pred, gt):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(i),
                        repr(float(q)), repr(float(g))])
    print(f"heatmap for {len(scene)} points -> {args.out}")


def cmd_ablate(args) -> None:
    if not args.val:
        raise CliError("UsageError", "ablate needs --val scenes to score the variant")
    cfg = _train_config(args.config)
    v = args.variant
    if v in ("no-size", "no-focal"):
        cfg = dataclasses.replace(cfg, use_size=(v != "no-size"), focal=(v != "no-focal"))
        params, _, run_dir, radii, groups = _train(args, cfg, f"{args.name}-{v}")
    else:
        if args.checkpoint:
            params, cfg = _load_checkpoint(args.checkpoint)
            radii, groups = load_stats(_existing(args.stats, "stats"))
        else:
            params, _, _, radii, groups = _train(args, cfg, f"{args.name}-default")
        cfg = dataclasses.replace(
            cfg, selection_mode={"random-centers": "random", "topk-centers": "topk"}.get(v, "greedy"),
            uniform_radius=(v == "uniform-radius"))
    report = validate(params, _load_scenes(args.val), cfg, radii, groups)
    out = Path(args.out) if args.out else _run_dir(args.run_dir, args.name) / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    fresh = not out.exists()
    with open(out, "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(["variant", "seed", "mprec", "mrec", "ap50"])
        w.writerow([v, cfg.seed, report.m_prec, report.m_rec, report.m_ap])
    print(f"{v}: mPrec {report.m_prec:.3f} mRec {report.m_rec:.3f} AP@50 {report.m_ap:.3f}")


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gicn", description="Center-heatmap instance segmentation on point clouds.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic labeled scenes")
    p.add_argument("--config", help="scene generator JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="class radii and size groups")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=6)
    p.set_defaults(func=cmd_stats)

    def training_flags(p):
        p.add_argument("--scenes", required=True)
        p.add_argument("--val")
        p.add_argument("--stats", required=True)
        p.add_argument("--config", help="train config JSON")
        p.add_argument("--run-dir", help=f"defaults to ${RUN_DIR_ENV}/<name> (or runs/<name>)")
        p.add_argument("--name", default="default")

    p = sub.add_parser("train", help="train a model")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True, help="instance file")
    p.add_argument("--ply", help="colored point cloud (default: next to --out)")
    p.add_argument("--n-points", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against labeled scenes")
    p.add_argument("--pred", required=True, help="instance file or directory of *.inst")
    p.add_argument("--gt", required=True, help="scene file or directory")
    p.add_argument("--out", help="CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-heatmap", help="per-point predicted and ground-truth heatmap CSV")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-points", type=int)
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser("ablate", help="train or score one ablation variant")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    training_flags(p)
    p.add_argument("--checkpoint", help="default model reused by inference-only variants")
    p.add_argument("--out", help="CSV to append the result row to")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CliError as err:
        _report(err.kind, str(err))
        return EXIT_USAGE if err.kind == "UsageError" else EXIT_FAILURE
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        _report(type(err).__name__, str(err))
        return EXIT_FAILURE
    return 0


def _report(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": " ".join(message.split())}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
