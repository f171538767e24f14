"""Independent reference implementations shared by the unit and acceptance tests."""

import itertools
import math
from types import SimpleNamespace as NS

import numpy as np

from gicn.evaluation import mask_iou
from gicn.geometry import Aabb


def literal_selection(q, pos, sem, radii, q_theta=0.4, t_theta=64):
    """Plain-loop transcription of the greedy heatmap peak picker."""
    q = [float(v) for v in q]
    chosen = []
    while True:
        best = 0
        for i in range(1, len(q)):
            if q[i] > q[best]:
                best = i
        if q[best] < q_theta:
            break
        if len(chosen) + 1 > t_theta:
            break
        chosen.append((best, q[best]))
        r = radii[int(sem[best])]
        p = pos[best]
        for i in range(len(q)):
            if math.dist(pos[i], p) <= r:
                q[i] = 0.0
    return chosen


def random_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 1001))
    pos = rng.uniform(0, 3, (n, 3))
    # coarse values so ties are common
    q = rng.integers(0, 21, n) / 20 if seed % 2 else rng.uniform(0, 1, n)
    n_cls = int(rng.integers(1, 5))
    sem = rng.integers(0, n_cls, n)
    radii = rng.uniform(0.02, 0.8, n_cls)
    return q, pos, sem, radii


def obj(points, cls=1, conf=1.0):
    return NS(points=np.asarray(list(points)), cls=cls, confidence=conf)


def tp_oracle(preds, gts, tau=0.5):
    """Largest number of same-class pred/gt pairs with IoU above tau, by exhaustive search."""
    best = 0
    slots = list(range(len(gts))) + [None] * len(preds)
    for perm in itertools.permutations(slots, len(preds)):
        tp = sum(1 for p, g in zip(preds, perm)
                 if g is not None and gts[g].cls == p.cls and mask_iou(p.points, gts[g].points) > tau)
        best = max(best, tp)
    return best


def random_scene(rng):
    """Disjoint ground-truth instances; overlapping, arbitrary predictions."""
    n_pts = 40
    labels = rng.integers(-1, rng.integers(1, 6), n_pts)
    gts = [obj(np.flatnonzero(labels == t), int(rng.integers(1, 3)))
           for t in range(labels.max() + 1) if np.any(labels == t)]
    preds = []
    for _ in range(rng.integers(0, 6)):
        if gts and rng.random() < 0.7:
            g = gts[rng.integers(len(gts))]
            keep = g.points[rng.random(len(g.points)) < rng.uniform(0.3, 1)]
            extra = rng.choice(n_pts, rng.integers(0, 5), replace=False)
            pts = np.union1d(keep, extra)
            cls = g.cls if rng.random() < 0.85 else 3 - g.cls
        else:
            pts, cls = rng.choice(n_pts, rng.integers(1, 10), replace=False), int(rng.integers(1, 3))
        if len(pts):
            preds.append(obj(pts, cls, float(rng.uniform())))
    return preds, gts


def monte_carlo_iou(a, b, rng, n=20000):
    hull = a.union(b)
    pts = rng.uniform(hull.min_corner, hull.max_corner, (n, 3))
    ina, inb = a.contains(pts), b.contains(pts)
    inter, union = np.sum(ina & inb), np.sum(ina | inb)
    p = inter / union
    return p, math.sqrt(max(p * (1 - p), 1e-12) / union)


def random_overlapping_pairs(rng, count):
    out = []
    while len(out) < count:
        lo1 = rng.uniform(0, 1, 3)
        hi1 = lo1 + rng.uniform(0.2, 1.5, 3)
        lo2 = lo1 + rng.uniform(-0.8, 0.8, 3)
        hi2 = lo2 + rng.uniform(0.2, 1.5, 3)
        out.append((Aabb(lo1, hi1), Aabb(lo2, hi2)))
    return out
