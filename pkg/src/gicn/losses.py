"""Training objectives: center focal, size CE, smooth-l1 bound, GIoU, mask focal, semantic CE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import DegenerateBoxError

EPS = 1e-7
TERMS = ("center", "bound", "iou", "mask", "size", "semantic")


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    sigma_g: float = 0.4
    beta: float = 1.0
    weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TERMS})

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("focal alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if not 0 < self.sigma_g < 1:
            raise ValueError("sigma_G must lie in (0, 1)")
        if self.beta <= 0:
            raise ValueError("smooth-l1 beta must be positive")
        self.weights = {t: float(self.weights.get(t, 1.0)) for t in TERMS}


@dataclass
class LossReport:
    total: Tensor
    terms: dict[str, float]
    assignment: list = field(default_factory=list)

    def as_row(self) -> dict[str, float]:
        return {"total": self.total.item(), **self.terms}


def _focal(p: Tensor, positive: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Mean of -alpha (1 - p_f)^gamma log p_f with p_f = p on positives, 1 - p elsewhere."""
    s = np.asarray(positive, dtype=float)
    pf = ad.clip(p * Tensor(2.0 * s - 1.0) + Tensor(1.0 - s), EPS, 1.0 - EPS)
    term = ad.log(pf)
    if gamma != 0:
        term = ad.power(1.0 - pf, gamma) * term
    return ad.mean(term) * (-alpha)


def center_focal_loss(q: Tensor, focal_positive, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    if len(np.asarray(focal_positive).reshape(-1)) != q.data.size:
        raise ad.ShapeError(f"center loss: {q.shape} predictions vs "
                            f"{np.shape(focal_positive)} targets")
    return _focal(q, np.asarray(focal_positive).reshape(q.shape), cfg.alpha, cfg.gamma)


def mask_focal_loss(probs: Tensor, membership, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    membership = np.asarray(membership, dtype=bool)
    if membership.shape != probs.shape:
        raise ad.ShapeError(f"mask loss: {probs.shape} vs {membership.shape}")
    return _focal(probs, membership, cfg.alpha, cfg.gamma)


def size_ce_loss(probs: Tensor, gt_group) -> Tensor:
    """Mean over candidates of -log P(ground-truth size group)."""
    gt_group = np.asarray(gt_group, dtype=np.intp)
    t, k = probs.shape
    if len(gt_group) != t:
        raise ad.ShapeError(f"size loss: {t} candidates vs {len(gt_group)} labels")
    picked = ad.gather_rows(ad.reshape(probs, (t * k,)), np.arange(t) * k + gt_group)
    return -ad.mean(ad.log(ad.clip(picked, EPS, 1.0)))


def bound_loss(pred: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """Smooth-l1 on raw corners, averaged over boxes and the six coordinates."""
    cfg = cfg or LossConfig()
    target = Tensor(np.asarray(target, dtype=float).reshape(pred.shape))
    return ad.mean(ad.smooth_l1(pred - target, cfg.beta))


def _prod3(x: Tensor) -> Tensor:
    return ad.take_cols(x, 0) * ad.take_cols(x, 1) * ad.take_cols(x, 2)


def giou_terms(pred: Tensor, target) -> Tensor:
    """Per-box GIoU with predicted corners canonicalized (min/max swap per axis)."""
    target = np.asarray(target, dtype=float).reshape(-1, 6)
    glo, ghi = Tensor(target[:, :3]), Tensor(target[:, 3:])
    a, b = ad.take_cols(pred, [0, 1, 2]), ad.take_cols(pred, [3, 4, 5])
    lo, hi = ad.minimum(a, b), ad.maximum(a, b)
    inter = _prod3(ad.relu(ad.minimum(hi, ghi) - ad.maximum(lo, glo)))
    vol_p = _prod3(hi - lo)
    vol_g = Tensor(np.prod(target[:, 3:] - target[:, :3], axis=1))
    union = vol_p + vol_g - inter
    if np.any(union.data <= 0):
        raise DegenerateBoxError("GIoU undefined: union of a box pair has zero volume")
    hull = _prod3(ad.maximum(hi, ghi) - ad.minimum(lo, glo))
    return inter / union - (hull - union) / hull


def giou_loss(pred: Tensor, target) -> Tensor:
    return ad.mean(1.0 - giou_terms(pred, target))


def semantic_ce_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    m, c = logits.shape
    lsm = ad.reshape(ad.log_softmax(logits), (m * c,))
    return -ad.mean(ad.gather_rows(lsm, np.arange(m) * c + labels))


def total_loss(terms: dict[str, Tensor], cfg: LossConfig | None = None,
               assignment=None) -> LossReport:
    """Weighted sum of whichever terms are present; absent terms count as 0."""
    cfg = cfg or LossConfig()
    total = Tensor(0.0)
    values = {}
    for name in TERMS:
        t = terms.get(name)
        if t is None:
            values[name] = 0.0
            continue
        if not np.isfinite(t.data).all():
            raise ad.NonFiniteError(f"loss term {name!r} is not finite")
        values[name] = t.item()
        total = total + t * cfg.weights[name]
    return LossReport(total, values, list(assignment or []))
