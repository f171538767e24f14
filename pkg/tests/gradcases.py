"""Gradient-check probes for every autodiff primitive and the composed training loss.

Each case is (name, fn, x) where fn maps a Tensor to a scalar Tensor. Probes sit
away from kinks (relu at 0, clip bounds, smooth-l1 at beta, max ties).
"""

import numpy as np

from gicn import autodiff as ad
from gicn.autodiff import Tensor


def _weighted(out_shape, seed):
    w = np.random.default_rng(seed).normal(size=out_shape)
    return lambda y: ad.sum_(y * Tensor(w))


def _away_from(x, kinks, margin=0.05):
    x = x.copy()
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, margin, -margin)
    return x


def primitive_cases(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(5, 4))
    row = rng.normal(size=(4,))
    pos = rng.uniform(0.5, 2.0, size=(5, 4))
    m = rng.normal(size=(4, 3))
    w = _weighted
    cases = [
        ("add", lambda x: w((5, 4), 1)(ad.add(x, Tensor(b))), a),
        ("add-broadcast-rhs", lambda x: w((5, 4), 2)(ad.add(Tensor(a), x)), row),
        ("sub", lambda x: w((5, 4), 3)(ad.sub(Tensor(b), x)), a),
        ("mul", lambda x: w((5, 4), 4)(ad.mul(x, Tensor(b))), a),
        ("mul-broadcast", lambda x: w((5, 4), 5)(ad.mul(Tensor(a), x)), row),
        ("div-numerator", lambda x: w((5, 4), 6)(ad.div(x, Tensor(pos))), a),
        ("div-denominator", lambda x: w((5, 4), 7)(ad.div(Tensor(a), x)), pos),
        ("minimum", lambda x: w((5, 4), 8)(ad.minimum(x, Tensor(b))),
         np.where(np.abs(a - b) < 0.05, a + 0.1, a)),
        ("maximum", lambda x: w((5, 4), 9)(ad.maximum(x, Tensor(b))),
         np.where(np.abs(a - b) < 0.05, a + 0.1, a)),
        ("matmul-left", lambda x: w((5, 3), 10)(ad.matmul(x, Tensor(m))), a),
        ("matmul-right", lambda x: w((5, 3), 11)(ad.matmul(Tensor(a), x)), m),
        ("neg", lambda x: w((5, 4), 12)(ad.neg(x)), a),
        ("relu", lambda x: w((5, 4), 13)(ad.relu(x)), _away_from(a, [0.0])),
        ("sigmoid", lambda x: w((5, 4), 14)(ad.sigmoid(x)), 3 * a),
        ("log", lambda x: w((5, 4), 15)(ad.log(x)), pos),
        ("exp", lambda x: w((5, 4), 16)(ad.exp(x)), a),
        ("absolute", lambda x: w((5, 4), 17)(ad.absolute(x)), _away_from(a, [0.0])),
        ("power", lambda x: w((5, 4), 18)(ad.power(x, 2.5)), pos),
        ("clip", lambda x: w((5, 4), 19)(ad.clip(x, -0.5, 0.5)), _away_from(a, [-0.5, 0.5])),
        ("smooth_l1", lambda x: w((5, 4), 20)(ad.smooth_l1(x, 1.0)), _away_from(2 * a, [-1.0, 1.0])),
        ("softmax", lambda x: w((5, 4), 21)(ad.softmax(x)), a),
        ("log_softmax", lambda x: w((5, 4), 22)(ad.log_softmax(x)), a),
        ("concat", lambda x: w((5, 8), 23)(ad.concat([x, Tensor(b)])), a),
        ("gather_rows", lambda x: w((7, 4), 24)(ad.gather_rows(x, [4, 0, 0, 2, 1, 4, 3])), a),
        ("take_cols", lambda x: w((5, 3), 25)(ad.take_cols(x, [3, 1, 3])), a),
        ("reshape", lambda x: w((2, 10), 26)(ad.reshape(x, (2, 10))), a),
        ("max_over-points", lambda x: w((4,), 27)(ad.max_over(x, 0)), a),
        ("max_over-last", lambda x: w((5,), 28)(ad.max_over(x, 1)), a),
        ("neighbor_max", lambda x: w((5, 4), 29)(ad.neighbor_max(x, [[0, 1], [1, 2], [2, 3], [3, 4], [4, 0]])), a),
        ("segment_max", lambda x: w((2, 4), 30)(ad.segment_max(x, [0, 0, 1, 1, 1], 2)), a),
        ("repeat_rows", lambda x: w((15, 4), 31)(ad.repeat_rows(x, 3)), a),
        ("sum-all", lambda x: ad.sum_(x), a),
        ("sum-axis", lambda x: w((4,), 32)(ad.sum_(x, 0)), a),
        ("mean-all", lambda x: ad.mean(x), a),
        ("mean-axis", lambda x: w((5,), 33)(ad.mean(x, 1)), a),
    ]
    return cases


def composed_loss_case(seed=0):
    """Total training loss of a 32-point toy block as a function of one weight matrix."""
    from gicn import losses as L
    from gicn import model as M
    from gicn.groundtruth import gt_heatmap

    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(point_widths=(8, 8), knn=4, fuse_width=8, global_width=8, feat_width=8,
                        center_widths=(8, 4), semantic_hidden=4, n_classes=3, k_groups=2,
                        size_hidden=4, box_local=(4, 4), box_after=(4,), mask_reduce=4,
                        mask_widths=(4,), init_seed=seed)
    params = M.init_params(cfg)
    # final layers start at zero; give them random values so every path carries gradient
    for name, t in params.tensors.items():
        t.data[...] = rng.normal(0, 0.5, t.shape)
    n = 32
    pos = np.concatenate([rng.uniform(0, 0.3, (16, 3)), rng.uniform(0.5, 0.8, (16, 3))])
    inst = np.repeat([0, 1], 16)
    feats = np.column_stack([rng.uniform(0, 1, (n, 3)), pos, pos])
    knn = M.knn_indices(pos, cfg.knn)
    hm = gt_heatmap(pos, inst)
    rows = np.array([hm.centers[0].center_index, hm.centers[1].center_index])
    gt_box = np.stack([np.concatenate([pos[inst == t].min(0), pos[inst == t].max(0)]) for t in (0, 1)])
    extents = np.array([[0.4, 0.4, 0.4], [0.4, 0.4, 0.4]])
    target = "bb.point.0.w"

    def fn(x):
        params.tensors[target] = x
        bb = M.backbone_forward(Tensor(feats), knn, params)
        terms = {
            "center": L.center_focal_loss(M.center_head(bb, params), hm.focal_positive),
            "semantic": L.semantic_ce_loss(M.semantic_head(bb, params), np.repeat([1, 2], 16)),
            "size": L.size_ce_loss(M.size_head(bb, rows, params), [0, 1]),
        }
        boxes = M.box_head(bb, pos, rows, extents, params).corners
        terms["bound"] = L.bound_loss(boxes, gt_box)
        terms["iou"] = L.giou_loss(boxes, gt_box)
        masks = M.mask_head(bb, pos, rows, boxes, params)
        terms["mask"] = L.mask_focal_loss(masks, np.stack([inst == 0, inst == 1]))
        return L.total_loss(terms).total

    return fn, params[target].data.copy()
