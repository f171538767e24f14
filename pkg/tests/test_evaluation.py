import numpy as np
import pytest
from hypothesis import given, strategies as st

from gicn.evaluation import (ap_from_ranked, average_precision_50, evaluate, mask_iou,
                             match_instances, mean_precision_recall)

from oracles import obj, random_scene, tp_oracle


def test_mask_iou_examples():
    assert mask_iou([1, 2, 3], [3, 2, 1]) == 1.0
    assert mask_iou([1, 2], [3, 4]) == 0.0
    assert mask_iou(range(100), range(40, 140)) == pytest.approx(60 / 140, abs=1e-15)
    with pytest.raises(ValueError):
        mask_iou([], [])


@given(st.sets(st.integers(0, 30)), st.sets(st.integers(0, 30)))
def test_mask_iou_symmetric(a, b):
    if not a and not b:
        return
    assert mask_iou(list(a), list(b)) == mask_iou(list(b), list(a))
    assert (mask_iou(list(a), list(b)) == 1.0) == (a == b)


def test_perfect_predictions():
    gts = [obj(range(0, 10), 1), obj(range(10, 30), 2)]
    res = match_instances([obj(g.points, g.cls) for g in gts], gts)
    assert res.pred_gt == [0, 1] and res.pred_iou == [1.0, 1.0]
    assert mean_precision_recall([res])[:2] == (1.0, 1.0)
    assert average_precision_50([res])[1] == 1.0


def one_tp_one_fp_one_fn():
    gts = [obj(range(0, 10)), obj(range(20, 30))]
    # 6 shared of 10 each way: IoU = 6 / 10 = 0.6
    preds = [obj(range(0, 6), conf=0.9), obj(range(40, 45), conf=0.8)]
    return match_instances(preds, gts)


def test_hand_trace_counts():
    res = one_tp_one_fp_one_fn()
    assert res.pred_iou[0] == pytest.approx(0.6)
    assert res.counts() == {1: (1, 1, 1)}
    assert mean_precision_recall([res])[:2] == (0.5, 0.5)


def test_empty_predictions():
    res = match_instances([], [obj(range(5))])
    assert mean_precision_recall([res])[:2] == (0.0, 0.0)
    assert average_precision_50([res])[1] == 0.0
    with pytest.raises(ValueError):
        mean_precision_recall([match_instances([obj([1])], [])])


def test_iou_exactly_half_does_not_match():
    res = match_instances([obj(range(0, 4))], [obj(range(0, 2))])
    assert res.pred_gt == [None]


def test_classes_missing_from_gt_are_ignored():
    res = match_instances([obj(range(5), 1), obj(range(9, 12), 3)], [obj(range(5), 1)])
    m_prec, m_rec, per_class = mean_precision_recall([res])
    assert (m_prec, m_rec) == (1.0, 1.0) and list(per_class) == [1]


def test_ap_hand_case():
    assert ap_from_ranked([1, 0, 1], 2) == 1 * 0.5 + (2 / 3) * 0.5
    assert ap_from_ranked([1, 0, 1], 2) == pytest.approx(0.8333333333, abs=1e-9)
    assert ap_from_ranked([], 3) == 0.0


def test_greedy_matching_equals_exhaustive_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(500):
        preds, gts = random_scene(rng)
        res = match_instances(preds, gts)
        tp = sum(g is not None for g in res.pred_gt)
        assert tp == tp_oracle(preds, gts), trial
        assert sum(res.gt_covered) == tp
        for i, g in enumerate(res.pred_gt):
            if g is not None:
                assert preds[i].cls == gts[g].cls and res.pred_iou[i] > 0.5


def test_duplicate_lowers_precision_not_recall():
    res = one_tp_one_fp_one_fn()
    gts = [obj(range(0, 10)), obj(range(20, 30))]
    preds = [obj(range(0, 6), conf=0.9), obj(range(40, 45), conf=0.8), obj(range(0, 6), conf=0.85)]
    dup = match_instances(preds, gts)
    p0, r0, _ = mean_precision_recall([res])
    p1, r1, _ = mean_precision_recall([dup])
    assert p1 < p0 and r1 == r0


@given(st.integers(0, 10_000))
def test_ap_depends_on_rank_only(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scene(rng)
    if not gts:
        return
    squashed = [obj(p.points, p.cls, float(np.exp(3 * p.confidence) - 7)) for p in preds]
    a = average_precision_50([match_instances(preds, gts)])
    b = average_precision_50([match_instances(squashed, gts)])
    assert a == b


def test_evaluate_report(tmp_path):
    gts = [[obj(range(0, 10), 1), obj(range(10, 20), 2)], [obj(range(0, 8), 1)]]
    preds = [[obj(range(0, 10), 1, 0.9), obj(range(10, 20), 1, 0.3)], [obj(range(0, 8), 1, 0.7)]]
    rep = evaluate(preds, gts)
    assert rep.per_class[1]["tp"] == 2 and rep.per_class[1]["fp"] == 1
    assert rep.per_class[2]["fn"] == 1 and rep.per_class[2]["precision"] == 0.0
    assert rep.m_rec == 0.5
    assert "mean" in rep.table()
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "class,precision,recall,ap50,tp,fp,fn"
    with pytest.raises(ValueError):
        evaluate(preds, gts[:1])
