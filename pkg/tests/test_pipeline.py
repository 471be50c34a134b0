import json
import time

import pytest
from pydantic import ValidationError

from holofocus.cli import main
from holofocus.io import file_sha256
from holofocus.pipeline import ExperimentConfig, derive_seed, run_pipeline

MINIMAL = {
    "dataset": {"n_classes": 2, "per_class": 10},
    "split": {"test_per_class": 3},
    "train": {"max_epochs": 3, "patience": 3},
    "preprocess": {"roi_size": 32, "out_size": 32},
    "models": [{"family": "cnn", "config": {"input_size": 32, "blocks": [{"out_channels": 4}], "n_classes": 2}}],
    "explain": {"n_samples": 2},
}


@pytest.fixture
def cache_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HOLOFOCUS_CACHE", str(tmp_path / "cache"))
    return tmp_path / "cache"


def test_minimal_run_under_60s(tmp_path, cache_env):
    start = time.perf_counter()
    res = run_pipeline(ExperimentConfig(**MINIMAL), tmp_path / "out", threads=1)
    assert time.perf_counter() - start < 60
    assert not res.skipped and "explain/cnn_NSO" in res.executed
    manifest = json.loads(res.manifest_path.read_text())
    emitted = {
        p.relative_to(tmp_path / "out").as_posix()
        for p in (tmp_path / "out").rglob("*")
        if p.is_file() and p.name != "run_manifest.json"
    }
    assert emitted == set(manifest["files"])
    for rel, digest in manifest["files"].items():
        assert file_sha256(tmp_path / "out" / rel) == digest
    assert any(cache_env.iterdir())


def test_rerun_skips_everything(tmp_path, cache_env):
    cfg = ExperimentConfig(**MINIMAL)
    first = run_pipeline(cfg, tmp_path / "out")
    again = run_pipeline(cfg, tmp_path / "out")
    assert again.executed == [] and sorted(again.skipped) == sorted(first.executed)
    changed = cfg.model_copy(update={"eval_anchors": ["center"]})
    assert run_pipeline(changed, tmp_path / "out").executed == []


def test_tampered_output_reruns_stage(tmp_path, cache_env):
    cfg = ExperimentConfig(**MINIMAL)
    run_pipeline(cfg, tmp_path / "out")
    (tmp_path / "out" / "reports" / "cnn_NSO_center.json").write_text("{}")
    res = run_pipeline(cfg, tmp_path / "out")
    assert res.executed == ["eval/cnn_NSO/center"]


def test_invalid_scenario_names_field(tmp_path, capsys):
    with pytest.raises(ValidationError) as err:
        ExperimentConfig(scenarios=["XFO"])
    assert "scenarios" in str(err.value)
    (tmp_path / "bad.json").write_text(json.dumps({"scenarios": ["XFO"]}))
    code = main(["run", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")])
    assert code != 0 and "scenarios" in capsys.readouterr().err


def test_failing_stage_is_named(tmp_path, cache_env, capsys):
    cfg = dict(MINIMAL, split={"test_per_class": 9})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code = main(["run", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "split/NSO" in capsys.readouterr().err
    assert (tmp_path / "o" / "scenarios" / "NSO" / "manifest.json").exists()


def test_derive_seed_is_stable():
    assert derive_seed(0, "train", "cnn") == derive_seed(0, "train", "cnn")
    assert derive_seed(0, "train", "cnn") != derive_seed(1, "train", "cnn")


def test_cli_subcommands(tmp_path, cache_env, capsys):
    (tmp_path / "c.json").write_text(json.dumps(MINIMAL))
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(out)]) == 0
    raw = out / "raw" / "manifest.json"
    assert main(["baseline", "--manifest", str(raw), "--z-min", "45", "--z-max", "55", "--out", str(tmp_path / "b")]) == 0
    summary = json.loads((tmp_path / "b" / "baseline_summary.json").read_text())
    assert summary["n_points"] == 11 and summary["selection"] == "argmax"
    assert main(["preprocess", "--raw", str(raw), "--scenario", "SFN", "--roi-size", "32", "--out", str(tmp_path / "p")]) == 0
    assert main(["train", "--scenario", "NSO", "--model", "cnn", "--config", str(tmp_path / "c.json"), "--out", str(out)]) == 0
    ckpt = out / "models" / "cnn_NSO" / "checkpoint"
    assert (ckpt / "manifest.json").exists()
    test_split = out / "splits" / "NSO" / "test.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--test", str(test_split), "--anchor", "bottom_left", "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "eval_bottom_left.json").exists()
    img = next((out / "scenarios" / "NSO" / "images").glob("*.png"))
    assert main(["explain", "--model", str(ckpt), "--image", str(img), "--method", "gradcam", "--out", str(tmp_path / "x")]) == 0
    assert (tmp_path / "x" / f"{img.stem}_gradcam.png").exists()
    assert (tmp_path / "x" / f"{img.stem}_gradcam.csv").exists()
    assert main(["model", "describe", "--family", "cnn"]) == 0
    assert "total parameters" in capsys.readouterr().out
