import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from birads_net.dataset import load_manifest, make_fold_plan
from birads_net.model import BackboneConfig, ModelConfig, build_model, load_checkpoint
from birads_net.pipeline import prepare_records
from birads_net.training import PlateauSchedule, TrainConfig, TrainingError, run_cross_validation, train_one_fold

TINY_MODEL = ModelConfig(BackboneConfig(width_divisor=16), input_size=32, head_hidden=16, fusion_hidden=8)


@pytest.fixture(scope="module")
def prepared(phantom_dir):
    manifest = load_manifest(phantom_dir / "manifest.csv")
    config = TrainConfig.desk_scale(model=TINY_MODEL)
    return manifest, prepare_records(manifest.records, config.preprocess_config())


def simulate(losses, lr_patience=15, stop_patience=30):
    """Reference schedule written out longhand for the scripted sequences."""
    best, wait_lr, wait_stop, lr, reduced = math.inf, 0, 0, 1e-5, False
    lrs = []
    for v in losses:
        lrs.append(lr)
        if v < best:
            best, wait_lr, wait_stop = v, 0, 0
        else:
            wait_lr += 1
            wait_stop += 1
            if not reduced and wait_lr == lr_patience:
                lr, reduced, wait_lr = 1e-6, True, 0
            if wait_stop == stop_patience:
                break
    return lrs


def scripted(values):
    return lambda model, epoch: values[epoch]


def _run(prepared, values, **overrides):
    _, data = prepared
    config = TrainConfig.desk_scale(model=TINY_MODEL, use_augmentation=False, max_epochs=len(values), **overrides)
    config = replace(config, initial_lr=1e-5, reduced_lr=1e-6)
    model = build_model(TINY_MODEL, seed=0)
    return train_one_fold(model, data.subset(range(6)), data.subset(range(6, 8)), config, validation_fn=scripted(values))


def test_schedule_state_machine():
    s = PlateauSchedule(1e-5, 1e-6, 15, 30)
    assert s.step(1.0)
    for i in range(15):
        assert not s.step(1.0)
    assert s.lr == 1e-6 and s.reduced
    for i in range(14):
        s.step(1.0)
    assert not s.should_stop
    s.step(1.0)
    assert s.should_stop


def test_decreasing_losses_keep_lr(prepared):
    values = [1.0 / (e + 1) for e in range(40)]
    _, log = _run(prepared, values)
    assert log.lrs == [1e-5] * 40


def test_lr_drops_after_fifteen_flat_epochs(prepared):
    values = [1.0] + [1.0] * 15 + [0.5] * 4
    _, log = _run(prepared, values)
    assert log.lrs[:16] == [1e-5] * 16
    assert log.lrs[16:] == [1e-6] * 4
    assert log.lrs == simulate(values)


def test_early_stop_after_thirty_flat_epochs(prepared):
    values = [0.9, 0.8] + [0.85] * 30 + [0.1] * 10
    model, log = _run(prepared, values)
    assert len(log.epochs) == 32
    assert log.best_epoch == 1
    assert log.lrs == simulate(values)
    lr_changes = sum(1 for a, b in zip(log.lrs, log.lrs[1:]) if a != b)
    assert lr_changes == 1


def test_lr_drops_at_most_once(prepared):
    values = [1.0] + [2.0] * 20 + [0.5] + [2.0] * 20
    _, log = _run(prepared, values)
    assert sorted(set(log.lrs), reverse=True) == [1e-5, 1e-6]
    assert log.lrs == simulate(values)


def test_best_checkpoint_restored(prepared):
    _, data = prepared
    config = TrainConfig.desk_scale(model=TINY_MODEL, use_augmentation=False, max_epochs=6)
    states = []

    def validation(model, epoch):
        states.append({k: v.clone() for k, v in model.state_dict().items()})
        return [3.0, 2.0, 1.0, 1.5, 1.2, 1.1][epoch]

    model, log = train_one_fold(build_model(TINY_MODEL), data.subset(range(6)), data.subset(range(6, 8)), config, validation_fn=validation)
    assert all(torch.equal(model.state_dict()[k], states[2][k]) for k in states[2])
    assert min(log.val_losses) == log.epochs[log.best_epoch]["val_loss"] == 1.0


def test_nonfinite_loss_aborts(prepared):
    _, data = prepared
    config = TrainConfig.desk_scale(model=TINY_MODEL, max_epochs=2)
    model = build_model(TINY_MODEL)
    with torch.no_grad():
        model.tumor_head[2].bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="tumor"):
        train_one_fold(model, data.subset(range(6)), data.subset(range(6, 8)), config)


def test_learnability_smoke(prepared):
    _, data = prepared
    tiny = data.subset(range(8))
    config = TrainConfig.desk_scale(model=TINY_MODEL, use_augmentation=False, max_epochs=50, stop_patience=60, lr_patience=55)
    model, log = train_one_fold(build_model(TINY_MODEL, seed=1), tiny, tiny, config)
    assert log.epochs[-1]["train"]["total"] < log.epochs[0]["train"]["total"]
    assert len(log.epochs) == 50


def test_config_round_trip(tmp_path):
    config = TrainConfig.desk_scale(seed=5, use_augmentation=False)
    (tmp_path / "c.json").write_text(json.dumps(config.to_dict()))
    assert TrainConfig.load(tmp_path / "c.json") == config
    (tmp_path / "c.toml").write_text('batch_size = 6\nmax_epochs = 3\nuse_crop = false\n[augmentation]\nzoom_range = 0.1\n')
    loaded = TrainConfig.load(tmp_path / "c.toml")
    assert loaded.max_epochs == 3 and not loaded.use_crop and loaded.augmentation.zoom_range == 0.1
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"batchsize": 6})
    with pytest.raises(ValueError):
        TrainConfig(lr_patience=30, stop_patience=15)
    with pytest.raises(ValueError):
        TrainConfig(initial_lr=1e-6, reduced_lr=1e-5)


def test_reference_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.initial_lr, c.reduced_lr, c.lr_patience, c.stop_patience) == (6, 1e-5, 1e-6, 15, 30)
    a = c.augmentation
    assert (a.zoom_range, a.width_shift, a.rotation_deg, a.shear, a.horizontal_flip) == (0.2, 0.1, 5.0, 0.2, True)


def test_effective_weights_zero_disabled_branches():
    c = TrainConfig(model=ModelConfig(branches=("margin",)))
    w = c.effective_weights()
    assert w.task == (0.0, 0.0, 0.2, 0.0, 0.0, 0.1, 0.1, 0.1, 0.1, 0.0, 0.5)
    assert w.agreement == 0.0


def test_log_records_config(prepared, tmp_path):
    _, data = prepared
    config = TrainConfig.desk_scale(model=TINY_MODEL, use_augmentation=False, max_epochs=2)
    train_one_fold(build_model(TINY_MODEL), data.subset(range(6)), data.subset(range(6, 8)), config, log_path=tmp_path / "log.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines[0]["config"]["use_augmentation"] is False
    assert [l["epoch"] for l in lines[1:]] == [0, 1]
    assert set(lines[1]["val"]) >= {"shape", "agreement", "total"}


def test_cross_validation_structure_and_determinism(prepared, tmp_path):
    manifest, data = prepared
    plan = make_fold_plan(manifest, k=3, val_fraction=0.15, seed=0)
    config = TrainConfig.desk_scale(model=TINY_MODEL, max_epochs=2)
    a = run_cross_validation(manifest, plan, config, out_dir=tmp_path / "a", prepared=data)
    b = run_cross_validation(manifest, plan, config, prepared=data)
    assert len(a.fold_reports) == 3
    assert a.aggregate == b.aggregate
    assert sorted(a.predictions) == list(range(len(manifest)))
    for f in range(3):
        load_checkpoint(tmp_path / "a" / "checkpoints" / f"fold_{f}")
    assert (tmp_path / "a" / "metrics" / "metrics.csv").is_file()
    assert len((tmp_path / "a" / "metrics" / "metrics.csv").read_text().splitlines()) == 5
    mean_acc = np.mean([r.tumor_accuracy for r in a.fold_reports])
    assert abs(a.aggregate.tumor_accuracy - mean_acc) < 1e-10
