import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gicn import autodiff as ad
from gicn import losses as L
from gicn.autodiff import NonFiniteError, Tensor
from gicn.geometry import Aabb, DegenerateBoxError, aabb_giou

CE = L.LossConfig(alpha=1.0, gamma=0.0)


def bce(p, y):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def test_center_focal_single_positive():
    got = L.center_focal_loss(Tensor([0.9]), [True]).item()
    assert got == pytest.approx(-0.25 * 0.1 ** 2 * math.log(0.9), abs=1e-15)
    assert got == pytest.approx(2.634e-4, abs=5e-8)


def test_center_focal_reduces_to_ce():
    rng = np.random.default_rng(0)
    q, y = rng.uniform(0.01, 0.99, 50), rng.uniform(size=50) < 0.3
    assert L.center_focal_loss(Tensor(q), y, CE).item() == pytest.approx(bce(q, y), abs=1e-12)


def test_center_focal_perfect_predictions_vanish():
    y = np.array([True, False, False, True])
    assert L.center_focal_loss(Tensor(np.where(y, 1.0, 0.0)), y).item() < 1e-15


def test_center_focal_clamps_extremes():
    v = L.center_focal_loss(Tensor([0.0, 1.0]), [True, False]).item()
    assert math.isfinite(v) and v > 0


def test_size_ce_examples():
    assert L.size_ce_loss(Tensor(np.eye(3)), [0, 1, 2]).item() == 0.0
    assert L.size_ce_loss(Tensor(np.full((4, 6), 1 / 6)), [0, 5, 2, 3]).item() == pytest.approx(math.log(6), abs=1e-12)
    assert L.size_ce_loss(Tensor([[0.5, 0.5]]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bound_loss_examples():
    b = np.array([[0, 0, 0, 1, 1, 1.0]])
    assert L.bound_loss(Tensor(b), b).item() == 0.0
    off = b.copy()
    off[0, 4] += 0.5
    assert L.bound_loss(Tensor(off), b).item() == pytest.approx(0.125 / 6, abs=1e-15)
    assert 0.125 / 6 == pytest.approx(0.02083, abs=1e-5)
    off[0, 4] = b[0, 4] + 2.0
    assert L.bound_loss(Tensor(off), b).item() == pytest.approx(0.25, abs=1e-15)


def test_smooth_l1_is_c1_at_beta():
    f = lambda d: L.bound_loss(Tensor([[d, 0, 0, 0, 0, 0]]), np.zeros((1, 6))).item()
    eps = 1e-7
    assert f(1 - eps) == pytest.approx(f(1 + eps), abs=1e-6)
    x = Tensor(np.array([[1.0, 0, 0, 0, 0, 0]]), requires_grad=True)
    with ad.Tape() as tape:
        loss = L.bound_loss(x, np.zeros((1, 6)))
    tape.backward(loss)
    left = (f(1.0) - f(1.0 - 1e-6)) / 1e-6
    assert x.grad[0, 0] == pytest.approx(left, abs=1e-5)


def test_giou_loss_examples():
    a = np.array([[0, 0, 0, 2, 2, 2.0]])
    b = np.array([[1, 1, 1, 3, 3, 3.0]])
    assert L.giou_loss(Tensor(a), a).item() == pytest.approx(0.0, abs=1e-15)
    got = L.giou_loss(Tensor(a), b).item()
    assert got == pytest.approx(1 - (1 / 15 - 12 / 27), abs=1e-12)
    assert got == pytest.approx(1.3778, abs=1e-4)
    far = L.giou_loss(Tensor(np.array([[0, 0, 0, 0.1, 0.1, 0.1]])), np.array([[50, 50, 50, 50.1, 50.1, 50.1]])).item()
    assert 1.99 < far < 2.0


def test_giou_loss_canonicalizes_raw_corners():
    raw = np.array([[2, 0, 2, 0, 2, 0.0]])  # min/max swapped on x and z
    assert L.giou_loss(Tensor(raw), np.array([[0, 0, 0, 2, 2, 2.0]])).item() == pytest.approx(0.0, abs=1e-15)


def test_giou_degenerate_pair_raises():
    p = np.array([[1, 1, 1, 1, 1, 1.0]])
    with pytest.raises(DegenerateBoxError):
        L.giou_loss(Tensor(p), p)


@given(st.integers(0, 10_000))
def test_giou_loss_matches_geometry_and_range(seed):
    rng = np.random.default_rng(seed)
    lo1, lo2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    a = np.concatenate([lo1, lo1 + rng.uniform(0.05, 1.5, 3)])
    b = np.concatenate([lo2, lo2 + rng.uniform(0.05, 1.5, 3)])
    got = L.giou_loss(Tensor(a[None]), b[None]).item()
    ref = 1 - aabb_giou(Aabb(a[:3], a[3:]), Aabb(b[:3], b[3:]))
    assert got == pytest.approx(ref, abs=1e-12)
    assert 0 <= got < 2


def test_mask_focal_examples():
    probs = Tensor(np.full((2, 5), 0.5))
    member = np.array([[1, 1, 0, 0, 0], [0, 0, 1, 1, 1]], bool)
    got = L.mask_focal_loss(probs, member).item()
    assert got == pytest.approx(-0.25 * 0.25 * math.log(0.5), abs=1e-15)
    assert got == pytest.approx(0.04332, abs=1e-5)
    assert L.mask_focal_loss(Tensor(member.astype(float)), member).item() < 1e-15
    rng = np.random.default_rng(1)
    p = rng.uniform(0.01, 0.99, (2, 5))
    assert L.mask_focal_loss(Tensor(p), member, CE).item() == pytest.approx(bce(p, member), abs=1e-12)


@given(st.integers(0, 10_000))
def test_focal_with_ce_settings_is_elementwise_bce(seed):
    rng = np.random.default_rng(seed)
    for p, y in zip(rng.uniform(1e-4, 1 - 1e-4, 20), rng.uniform(size=20) < 0.5):
        assert L.center_focal_loss(Tensor([p]), [y], CE).item() == pytest.approx(bce(np.array([p]), np.array([y])), rel=1e-12)


def test_semantic_ce():
    logits = np.zeros((3, 4))
    assert L.semantic_ce_loss(Tensor(logits), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_total_loss_linearity_and_zero():
    assert L.total_loss({t: Tensor(0.0) for t in L.TERMS}).total.item() == 0.0
    vals = dict(zip(L.TERMS, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
    rep = L.total_loss({t: Tensor(v) for t, v in vals.items()})
    assert rep.total.item() == pytest.approx(2.1, abs=1e-15)
    assert rep.terms == vals
    weighted = L.total_loss({t: Tensor(v) for t, v in vals.items()},
                            L.LossConfig(weights={"center": 2.0, "mask": 0.0}))
    assert weighted.total.item() == pytest.approx(2.1 + 0.1 - 0.4, abs=1e-15)


def test_total_loss_names_the_nonfinite_term():
    with pytest.raises(NonFiniteError, match="'iou'"):
        L.total_loss({"center": Tensor(0.1), "iou": Tensor(np.nan)})


@given(st.integers(0, 10_000))
def test_every_term_nonnegative(seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(0, 1, 30)
    y = rng.uniform(size=30) < 0.3
    probs = rng.dirichlet(np.ones(4), 5)
    assert L.center_focal_loss(Tensor(q), y).item() >= 0
    assert L.size_ce_loss(Tensor(probs), rng.integers(0, 4, 5)).item() >= 0
    assert L.bound_loss(Tensor(rng.normal(size=(5, 6))), rng.normal(size=(5, 6))).item() >= 0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(alpha=0)
    with pytest.raises(ValueError):
        L.LossConfig(gamma=-1)
    with pytest.raises(ValueError):
        L.LossConfig(sigma_g=1.2)
