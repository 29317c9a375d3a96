import json
import time

import numpy as np
import pytest

from uasnet.cli import main
from uasnet.data import read_manifest
from uasnet.masks import build_mcm

SMOKE_CONFIG = {
    "name": "smoke",
    "epochs": 1,
    "batch_size": 4,
    "widths": [16, 32, 64, 128, 256],
    "generator_widths": [16, 32, 64, 128],
    "discriminator_width": 16,
    "folds": [0],
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = [ln for ln in err.strip().splitlines() if ln.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def smoke_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "smoke"
    # stratified folds need 5 samples per class, so the 8-sample smoke set is all benign
    assert main(["generate", "--count", "8", "--seed", "1", "--out", str(out), "--malignant-fraction", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def smoke_run(smoke_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "smoke.json"
    cfg.write_text(json.dumps({**SMOKE_CONFIG, "dataset": str(smoke_dataset)}))
    start = time.perf_counter()
    code = main(["train", "--config", str(cfg), "--out", str(root / "runs")])
    return code, root / "runs" / "smoke", time.perf_counter() - start, cfg


def test_generate_empty_manifest(tmp_path, capsys):
    code, out, _ = run(["generate", "--count", 0, "--out", tmp_path / "d"], capsys)
    assert code == 0 and json.loads(out)["status"] == "ok"
    assert read_manifest(tmp_path / "d").samples == []


def test_generate_reproducible_bytes(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["generate", "--count", 3, "--seed", 5, "--out", tmp_path / name], capsys)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_bad_spec_is_usage_error(tmp_path, capsys):
    code, _, err = run(["generate", "--count", 2, "--out", tmp_path / "d", "--patch-size", 50], capsys)
    assert code == 1 and error_line(err)["exit_code"] == 1


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(["generate", "--bogus"], capsys)
    assert code == 1
    assert error_line(err)["error"] == "UsageError"


def test_validate(smoke_dataset, tmp_path, capsys):
    assert run(["validate", "--dataset", smoke_dataset], capsys)[0] == 0
    code, _, err = run(["validate", "--dataset", tmp_path], capsys)
    assert code == 2 and error_line(err)["exit_code"] == 2


def test_train_missing_config(tmp_path, capsys):
    code, _, err = run(["train", "--config", tmp_path / "nope.json"], capsys)
    assert code == 1 and "not found" in error_line(err)["message"]


def test_train_missing_dataset_is_data_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SMOKE_CONFIG, "dataset": str(tmp_path / "missing")}))
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "runs"], capsys)
    assert code == 2 and error_line(err)["error"] == "DataError"


def test_train_smoke(smoke_run):
    code, run_dir, seconds, _ = smoke_run
    assert code == 0
    assert seconds < 300
    for name in ("config-resolved.json", "metrics.csv", "losses.csv", "report.csv", "report.md"):
        assert (run_dir / name).exists(), name
    assert (run_dir / "checkpoints" / "jap" / "fold0" / "best.pt").exists()
    resolved = json.loads((run_dir / "config-resolved.json").read_text())
    assert resolved["epochs"] == 1 and resolved["fa_cat_placement"] == [0, 1]


def test_train_rerun_identical_metrics(smoke_run, tmp_path):
    _, run_dir, _, cfg = smoke_run
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "smoke" / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


def test_predict_outputs(smoke_run, smoke_dataset, tmp_path, capsys):
    _, run_dir, _, _ = smoke_run
    ckpt = run_dir / "checkpoints" / "jap" / "fold0" / "best.pt"
    sample_dir = smoke_dataset / read_manifest(smoke_dataset).ids[0]
    code, out, _ = run(["predict", "--checkpoint", ckpt, "--dataset", sample_dir, "--out", tmp_path], capsys)
    assert code == 0
    written = {p.name for p in (tmp_path / sample_dir.name).iterdir()}
    names = ["p_union", "p_inter", "p_mcm", "r", "s_union", "s_inter", "s_mcm"]
    assert written == {f"{n}.{ext}" for n in names for ext in ("png", "f32")}
    load = lambda n: np.frombuffer((tmp_path / sample_dir.name / f"{n}.f32").read_bytes(), "<f4").reshape(64, 64)
    expected = build_mcm(load("p_union"), load("p_inter")).soft
    assert np.array_equal(load("p_mcm"), expected)


def test_predict_without_masks(smoke_run, smoke_dataset, tmp_path, capsys):
    _, run_dir, _, _ = smoke_run
    ckpt = run_dir / "checkpoints" / "jap" / "fold0" / "best.pt"
    src = smoke_dataset / read_manifest(smoke_dataset).ids[0]
    dst = tmp_path / "unlabelled"
    dst.mkdir()
    meta = json.loads((src / "meta.json").read_text())
    meta.update(n_annotations=0, sample_id="unlabelled")
    (dst / "meta.json").write_text(json.dumps(meta))
    (dst / "image.f32").write_bytes((src / "image.f32").read_bytes())
    code, _, _ = run(["predict", "--checkpoint", ckpt, "--dataset", dst, "--out", tmp_path / "out"], capsys)
    assert code == 0
    assert len(list((tmp_path / "out" / "unlabelled").glob("*.png"))) == 4


def test_predict_bad_checkpoint(smoke_dataset, tmp_path, capsys):
    (tmp_path / "x.pt").write_bytes(b"junk")
    code, _, err = run(["predict", "--checkpoint", tmp_path / "x.pt", "--dataset", smoke_dataset,
                        "--out", tmp_path / "o"], capsys)
    assert code == 2 and error_line(err)["exit_code"] == 2


def test_analyze_hu_dataset_only(smoke_dataset, tmp_path, capsys):
    code, _, _ = run(["analyze-hu", "--dataset", smoke_dataset, "--out", tmp_path], capsys)
    assert code == 0
    assert sorted(p.name for p in tmp_path.glob("*.csv")) == ["real_hc.csv", "real_lc.csv"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert abs(summary["real_lc"]["mode"] + 750) <= 100
    assert "distance" not in summary
    assert (tmp_path / "hu_curves.png").exists()


def test_analyze_hu_with_checkpoint(smoke_run, smoke_dataset, tmp_path, capsys, monkeypatch):
    import uasnet.model
    from uasnet.data import read_sample

    # stand-in network that reproduces each sample's own annotations
    truth = {}
    for sid in read_manifest(smoke_dataset).ids:
        s = read_sample(smoke_dataset / sid)
        truth[s.image.tobytes()] = s.mcm()
    monkeypatch.setattr(uasnet.model, "predict", lambda model, image: {"mcm": truth[image.tobytes()]})
    ckpt = smoke_run[1] / "checkpoints" / "jap" / "fold0" / "best.pt"
    code, _, _ = run(["analyze-hu", "--dataset", smoke_dataset, "--checkpoint", ckpt, "--out", tmp_path], capsys)
    assert code == 0
    assert len(list(tmp_path.glob("*.csv"))) == 4
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["distance"] == {"hc": 0.0, "lc": 0.0}
