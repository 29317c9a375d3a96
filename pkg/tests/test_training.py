import csv
import json

import numpy as np
import pytest
import torch

from conftest import TINY_SPEC, tiny_config
from uasnet.adversarial import joint_objective
from uasnet.checkpoint import load_models, read_checkpoint, save_checkpoint
from uasnet.data import DatasetManifest, generate_dataset, read_manifest, write_dataset
from uasnet.errors import DataError, InvalidInputError
from uasnet.training import (METRICS_HEADER, CVReport, FoldResult, TensorSet, TrainConfig, audit_partition,
                             build_models, load_config, run_cv, run_fold, train_step)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_config_validation(tmp_path):
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(lr_seg=-1.0)
    with pytest.raises(InvalidInputError):
        TrainConfig(weights={"seg": 1, "l1": -1, "gan": 1, "malignancy": 1})
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"epochs": 2, "learning_rate": 1})
    with pytest.raises(InvalidInputError):
        load_config(tmp_path / "missing.json")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 3, "fa_cat_placement": "low"}))
    cfg = load_config(path)
    assert cfg.epochs == 3 and cfg.fa_cat_placement == (3, 4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_jap_off_reports_absent_terms(tiny_samples):
    cfg = tiny_config(jap_enabled=False)
    models = build_models(cfg)
    b = train_step(models, TensorSet.from_samples(tiny_samples[:4]).batch([0, 1, 2, 3]), cfg)
    values = b.as_floats()
    assert values["l1_gen"] is None and values["gan_d"] is None and values["malig_ce"] is None
    assert values["total"] == values["seg_bce"]


def test_jap_off_matches_run_without_heads(tiny_samples):
    cfg = tiny_config(jap_enabled=False)
    batch = TensorSet.from_samples(tiny_samples[:4]).batch([0, 1, 2, 3])
    with_heads = build_models(cfg, with_heads=True)
    without = build_models(cfg, with_heads=False)
    heads_before = snapshot(with_heads.heads)
    assert same_state(snapshot(with_heads.seg), snapshot(without.seg))
    for _ in range(2):
        train_step(with_heads, batch, cfg)
        train_step(without, batch, cfg)
    assert same_state(snapshot(with_heads.seg), snapshot(without.seg))
    assert same_state(snapshot(with_heads.heads), heads_before)


def test_zero_learning_rate_leaves_parameters(tiny_samples):
    cfg = tiny_config(lr_seg=0.0, lr_d=0.0, lr_c=0.0)
    models = build_models(cfg)
    batch = TensorSet.from_samples(tiny_samples[:4]).batch([0, 1, 2, 3])
    params = {k: v.detach().clone() for k, v in models.seg.named_parameters()}
    heads = {k: v.detach().clone() for k, v in models.heads.named_parameters()}
    # train-mode BatchNorm normalises with batch statistics, so outputs only depend on parameters
    models.train()
    before = joint_objective(models.seg, models.heads, batch).as_floats()
    reported = train_step(models, batch, cfg).as_floats()
    assert all(torch.equal(v, params[k]) for k, v in models.seg.named_parameters())
    assert all(torch.equal(v, heads[k]) for k, v in models.heads.named_parameters())
    after = joint_objective(models.seg, models.heads, batch).as_floats()
    for k, v in before.items():
        assert reported[k] == pytest.approx(v, rel=1e-6)
        assert after[k] == pytest.approx(v, rel=1e-6)


def test_seg_loss_decreases_when_overfitting(tiny_samples):
    cfg = tiny_config(jap_enabled=False)
    models = build_models(cfg)
    batch = TensorSet.from_samples(tiny_samples[:4]).batch([0, 1, 2, 3])
    first = train_step(models, batch, cfg).as_floats()["seg_bce"]
    for _ in range(199):
        last = train_step(models, batch, cfg).as_floats()["seg_bce"]
    assert last < first


def test_run_fold_deterministic_epoch0(tiny_samples):
    cfg = tiny_config(epochs=1)
    a = run_fold(tiny_samples[:12], tiny_samples[12:], cfg)
    b = run_fold(tiny_samples[:12], tiny_samples[12:], cfg)
    assert a.epochs[0]["losses"] == b.epochs[0]["losses"]
    assert a.per_sample == b.per_sample


def test_run_fold_rejects_empty_split(tiny_samples):
    with pytest.raises(DataError):
        run_fold([], tiny_samples[:2], tiny_config())


def test_resume_matches_uninterrupted(tiny_samples, tmp_path):
    cfg = tiny_config(epochs=3)
    full = run_fold(tiny_samples[:12], tiny_samples[12:], cfg, tmp_path / "full", 0)
    # stop after one epoch, then resume from last.pt
    run_fold(tiny_samples[:12], tiny_samples[12:], tiny_config(epochs=1), tmp_path / "cut", 0)
    (tmp_path / "cut" / "checkpoints" / "jap" / "fold0" / "result.json").unlink()
    resumed = run_fold(tiny_samples[:12], tiny_samples[12:], cfg, tmp_path / "cut", 0)
    assert [e["losses"] for e in resumed.epochs] == [e["losses"] for e in full.epochs]
    assert resumed.per_sample == full.per_sample
    # a finished fold is not retrained
    again = run_fold(tiny_samples[:12], tiny_samples[12:], cfg, tmp_path / "cut", 0)
    assert again.per_sample == full.per_sample


def test_checkpoint_round_trip(tmp_path, tiny_samples):
    models = build_models(tiny_config())
    path = save_checkpoint(tmp_path / "m.pt", models.seg, models.heads)
    seg, heads, payload = load_models(path)
    assert payload["format"] == "uasnet-checkpoint" and payload["version"] == 1
    assert same_state(snapshot(seg), snapshot(models.seg))
    assert same_state(snapshot(heads), snapshot(models.heads))
    (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "bad.pt")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "none.pt")
    torch.save({"format": "uasnet-checkpoint", "version": 99}, tmp_path / "v99.pt")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "v99.pt")


def test_audit_partition():
    audit_partition(["a", "b", "c"], ["a", "b"], ["c"])
    with pytest.raises(DataError):
        audit_partition(["a", "b", "c"], ["a", "b"], ["b", "c"])
    with pytest.raises(DataError):
        audit_partition(["a", "b", "c"], ["a"], ["c"])


def fake_result(arm, fold, values):
    per_sample = {t: {"dice": list(values), "iou": [v / 2 for v in values]} for t in ("r", "union", "inter")}
    return FoldResult(arm, fold, [], 0, 0.0, per_sample, [f"s{i}" for i in range(len(values))])


def test_report_averaging_and_layout(tmp_path):
    rng = np.random.default_rng(0)
    folds = {f: fake_result("jap", f, rng.random(3 + f)) for f in range(5)}
    report = CVReport({"jap": folds})
    t = report.table("jap", "r", "dice")
    assert list(t["folds"]) == [0, 1, 2, 3, 4]
    assert t["average"] == pytest.approx(np.mean([np.mean(folds[f].per_sample["r"]["dice"]) for f in range(5)]),
                                         abs=1e-9)
    csv_path, md_path = report.write(tmp_path)
    rows = list(csv.DictReader(csv_path.open()))
    assert len(rows) == 6
    assert list(rows[0]) == ["arm", "target", "metric", "fold1", "fold2", "fold3", "fold4", "fold5", "average"]
    assert "| Average |" in md_path.read_text().splitlines()[0]


def test_run_cv_small(tmp_path):
    samples = generate_dataset(10, seed=3, spec=TINY_SPEC, malignant_fraction=0.5)
    write_dataset(samples, tmp_path / "data")
    manifest = read_manifest(tmp_path / "data")
    cfg = tiny_config(epochs=1, folds=(0, 1, 2, 3, 4), compare_jap=True)
    report = run_cv(manifest, cfg, tmp_path / "run")
    assert set(report.folds) == {"jap", "no_jap"}
    val_seen = sorted(i for res in report.folds["jap"].values() for i in res.val_ids)
    assert val_seen == sorted(manifest.ids)
    rows = list(csv.reader((tmp_path / "run" / "metrics.csv").open()))
    assert rows[0] == METRICS_HEADER
    epoch_rows = [r for r in rows[1:] if r[3] == "ALL"]
    # epochs x 3 targets x 2 metrics per fold and arm
    assert len(epoch_rows) == 2 * 5 * 1 * 3 * 2
    assert (tmp_path / "run" / "report.md").exists()


def test_run_cv_empty_manifest():
    with pytest.raises(DataError):
        run_cv(DatasetManifest([]), tiny_config())
