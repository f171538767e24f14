"""Instance metrics over point-set masks: mPrec / mRec at IoU 0.5 and AP@50."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IOU_THRESHOLD = 0.5


def mask_iou(a, b) -> float:
    a = np.unique(np.asarray(a, dtype=np.int64))
    b = np.unique(np.asarray(b, dtype=np.int64))
    if len(a) == 0 and len(b) == 0:
        raise ValueError("mask IoU of two empty sets is undefined")
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


@dataclass
class MatchResult:
    pred_cls: list[int]
    pred_conf: list[float]
    pred_gt: list[int | None]
    pred_iou: list[float]
    gt_cls: list[int]
    gt_covered: list[bool]

    def counts(self) -> dict[int, tuple[int, int, int]]:
        """Per class (TP, FP, FN)."""
        out: dict[int, list[int]] = {}
        for c, g in zip(self.pred_cls, self.pred_gt):
            row = out.setdefault(c, [0, 0, 0])
            row[0 if g is not None else 1] += 1
        for c, cov in zip(self.gt_cls, self.gt_covered):
            if not cov:
                out.setdefault(c, [0, 0, 0])[2] += 1
        return {c: tuple(v) for c, v in out.items()}


def match_instances(preds, gts, tau: float = IOU_THRESHOLD) -> MatchResult:
    """Greedy matching in descending confidence.

    ``preds`` and ``gts`` carry ``points``, ``cls`` (and ``confidence`` for
    predictions). Each prediction takes the unmatched same-class ground truth
    with the highest IoU, provided the IoU exceeds ``tau``.
    """
    n_p = len(preds)
    gt_sets = [np.unique(np.asarray(g.points)) for g in gts]
    pred_gt: list[int | None] = [None] * n_p
    pred_iou = [0.0] * n_p
    covered = [False] * len(gts)
    order = sorted(range(n_p), key=lambda i: -preds[i].confidence)
    for i in order:
        p = preds[i]
        best, best_iou = None, tau
        for j, g in enumerate(gts):
            if g.cls != p.cls:
                continue
            if len(p.points) == 0 and len(gt_sets[j]) == 0:
                continue
            iou = mask_iou(p.points, gt_sets[j])
            if iou > pred_iou[i]:
                pred_iou[i] = iou
            if not covered[j] and iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            covered[best] = True
            pred_gt[i] = best
            pred_iou[i] = best_iou
    return MatchResult([int(p.cls) for p in preds], [float(p.confidence) for p in preds],
                       pred_gt, pred_iou, [int(g.cls) for g in gts], covered)


def _classes_in_gt(results: Sequence[MatchResult]) -> list[int]:
    return sorted({c for r in results for c in r.gt_cls})


def mean_precision_recall(results: Sequence[MatchResult]) -> tuple[float, float, dict]:
    """Class-averaged precision and recall over classes present in the ground truth.

    A class with ground truth but no predictions has precision 0.
    """
    classes = _classes_in_gt(results)
    if not classes:
        raise ValueError("no ground-truth instances")
    tp = {c: 0 for c in classes}
    fp = dict(tp)
    fn = dict(tp)
    for r in results:
        for c, (a, b, d) in r.counts().items():
            if c in tp:
                tp[c] += a
                fp[c] += b
                fn[c] += d
    per_class = {}
    for c in classes:
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        per_class[c] = {"tp": tp[c], "fp": fp[c], "fn": fn[c], "precision": prec, "recall": rec}
    m_prec = float(np.mean([v["precision"] for v in per_class.values()]))
    m_rec = float(np.mean([v["recall"] for v in per_class.values()]))
    return m_prec, m_rec, per_class


def ap_from_ranked(tp_flags, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    tp_flags = np.asarray(tp_flags, dtype=float)
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def average_precision_50(results: Sequence[MatchResult]) -> tuple[dict[int, float], float]:
    classes = _classes_in_gt(results)
    ap = {}
    for c in classes:
        scored = [(conf, g is not None)
                  for r in results
                  for pc, conf, g in zip(r.pred_cls, r.pred_conf, r.pred_gt) if pc == c]
        scored.sort(key=lambda x: -x[0])
        n_gt = sum(1 for r in results for gc in r.gt_cls if gc == c)
        ap[c] = ap_from_ranked([f for _, f in scored], n_gt)
    return ap, float(np.mean(list(ap.values()))) if ap else 0.0


@dataclass
class EvalReport:
    m_prec: float
    m_rec: float
    m_ap: float
    per_class: dict[int, dict] = field(default_factory=dict)

    def table(self, class_names: dict[int, str] | None = None) -> str:
        names = class_names or {}
        lines = [f"{'class':<12}{'prec':>8}{'rec':>8}{'AP@50':>8}{'TP':>6}{'FP':>6}{'FN':>6}"]
        for c, row in self.per_class.items():
            lines.append(f"{names.get(c, str(c)):<12}{row['precision']:>8.3f}{row['recall']:>8.3f}"
                         f"{row['ap50']:>8.3f}{row['tp']:>6}{row['fp']:>6}{row['fn']:>6}")
        lines.append(f"{'mean':<12}{self.m_prec:>8.3f}{self.m_rec:>8.3f}{self.m_ap:>8.3f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "precision", "recall", "ap50", "tp", "fp", "fn"])
            for c, row in self.per_class.items():
                w.writerow([c, row["precision"], row["recall"], row["ap50"],
                            row["tp"], row["fp"], row["fn"]])
            w.writerow(["mean", self.m_prec, self.m_rec, self.m_ap, "", "", ""])


def evaluate(pred_scenes, gt_scenes, tau: float = IOU_THRESHOLD) -> EvalReport:
    """Metrics over paired per-scene instance lists."""
    if len(pred_scenes) != len(gt_scenes):
        raise ValueError(f"{len(pred_scenes)} prediction sets for {len(gt_scenes)} scenes")
    results = [match_instances(p, g, tau) for p, g in zip(pred_scenes, gt_scenes)]
    m_prec, m_rec, per_class = mean_precision_recall(results)
    ap, m_ap = average_precision_50(results)
    for c in per_class:
        per_class[c]["ap50"] = ap[c]
    return EvalReport(m_prec, m_rec, m_ap, per_class)
