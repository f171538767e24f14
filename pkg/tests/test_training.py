import json

import numpy as np
import pytest

from gicn import autodiff as ad
from gicn import model as M
from gicn.autodiff import NonFiniteError
from gicn.dataset import SceneConfig, generate_scene
from gicn.groundtruth import compute_class_radii, compute_size_groups
from gicn.training import TrainConfig, lr_at, train


@pytest.fixture(scope="module")
def tiny():
    scenes = [generate_scene(SceneConfig(), s) for s in (11, 12)]
    return scenes, compute_class_radii(scenes), compute_size_groups(scenes)


def tiny_config(**kw):
    base = dict(epochs=2, n_points=64, warmup=1, batch_size=2, blocks_per_scene=2, seed=5,
                val_every=1, model=M.toy_config())
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    assert lr_at(0) == 0.002
    assert lr_at(19) == 0.002
    assert lr_at(20) == 0.001
    assert lr_at(45) == 0.0005
    for e in range(200):
        assert lr_at(e) == 0.002 * 0.5 ** (e // 20)
    with pytest.raises(ValueError):
        lr_at(-1)


def test_config_validation_and_round_trip():
    cfg = tiny_config(focal=False, selection_mode="topk")
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochz": 3})


def test_one_epoch_smoke(tiny, tmp_path):
    scenes, radii, groups = tiny
    params, log = train(scenes[:1], scenes[1:], tiny_config(epochs=1), radii, groups, tmp_path)
    assert (tmp_path / "epoch_0.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "log.csv").read_text().startswith("epoch,lr,total,")
    assert len(log.rows) == 1 and np.isfinite(log.rows[0]["total"])
    assert log.rows[0]["lr"] == 0.002
    back, meta = M.ModelParams.load(tmp_path / "epoch_0.ckpt")
    assert meta["epoch"] == 0 and TrainConfig.from_dict(meta["train"]).seed == 5


def test_identical_runs_are_bit_identical(tiny, tmp_path):
    scenes, radii, groups = tiny
    for name in "ab":
        train(scenes[:1], scenes[1:], tiny_config(), radii, groups, tmp_path / name)
    for f in ("epoch_0.ckpt", "epoch_1.ckpt", "best.ckpt", "log.csv", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_seed_changes_the_run(tiny):
    scenes, radii, groups = tiny
    a, _ = train(scenes[:1], [], tiny_config(epochs=1), radii, groups)
    b, _ = train(scenes[:1], [], tiny_config(epochs=1, seed=6), radii, groups)
    assert any(not np.array_equal(a[k].data, b[k].data) for k in a.tensors)


def test_keep_checkpoints(tiny, tmp_path):
    scenes, radii, groups = tiny
    train(scenes[:1], [], tiny_config(epochs=3, keep_checkpoints=1), radii, groups, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("epoch_*.ckpt")) == ["epoch_2.ckpt"]


def poison(monkeypatch, name):
    real = M.init_params

    def poisoned(cfg):
        params = real(cfg)
        params[name].data[...] = np.nan
        return params

    monkeypatch.setattr(M, "init_params", poisoned)


def test_non_finite_loss_aborts_naming_the_term(tiny, monkeypatch):
    scenes, radii, groups = tiny
    poison(monkeypatch, "center.3.b")
    with pytest.raises(NonFiniteError, match="'center'"):
        train(scenes[:1], [], tiny_config(epochs=1), radii, groups)


def test_non_finite_gradient_aborts_before_any_update(tiny, monkeypatch):
    scenes, radii, groups = tiny
    # relu masks the NaN in the forward pass but not in the backward pass
    poison(monkeypatch, "center.2.w")
    before, live = {}, {}
    real_step = ad.adam_step

    def spy(params, grads, state, lr):
        live.update(params)
        before.update({k: t.data.copy() for k, t in params.items()})
        real_step(params, grads, state, lr)

    monkeypatch.setattr(ad, "adam_step", spy)
    with pytest.raises(NonFiniteError, match="non-finite gradient"):
        train(scenes[:1], [], tiny_config(epochs=1), radii, groups)
    assert live and all(np.array_equal(live[k].data, before[k], equal_nan=True) for k in live)


def test_ablation_flags_change_the_loss(tiny):
    scenes, radii, groups = tiny
    _, base = train(scenes[:1], [], tiny_config(epochs=1), radii, groups)
    _, ce = train(scenes[:1], [], tiny_config(epochs=1, focal=False), radii, groups)
    _, nosize = train(scenes[:1], [], tiny_config(epochs=1, use_size=False), radii, groups)
    assert ce.rows[0]["center"] != base.rows[0]["center"]
    assert nosize.rows[0]["size"] == 0.0 and base.rows[0]["size"] > 0


def test_empty_training_set_rejected(tiny):
    _, radii, groups = tiny
    with pytest.raises(ValueError):
        train([], [], tiny_config(), radii, groups)
