import json

import numpy as np
import pytest

from ecgfuse.cli import run_subcommand
from ecgfuse.synth import make_dataset, write_dataset_csv


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("data")
    write_dataset_csv(make_dataset(24, seed=5, n_classes=4), directory)
    return directory


@pytest.fixture(scope="module")
def pipeline(dataset_dir, tmp_path_factory):
    """Run ingest + encode once; several tests reuse the artifacts."""
    work = tmp_path_factory.mktemp("work")
    manifest = work / "manifest.json"
    cache = work / "cache"
    rc = run_subcommand(["ingest", "--input", str(dataset_dir), "--format", "csv", "--out", str(manifest)])
    assert rc == 0
    rc = run_subcommand([
        "encode", "--manifest", str(manifest), "--backend", "fallback:16:7",
        "--fusion-input", "per-lead", "--cache", str(cache),
    ])
    assert rc == 0
    return {"work": work, "manifest": manifest, "cache": cache}


def test_ingest_manifest_contents(pipeline):
    manifest = json.loads(pipeline["manifest"].read_text())
    assert len(manifest["records"]) == 24
    assert all(r["accepted"] for r in manifest["records"])
    assert all(r["n_samples"] == 5000 for r in manifest["records"])
    assert manifest["stage_hash"]


def test_spectrogram_export(pipeline):
    out = pipeline["work"] / "specs"
    rc = run_subcommand(["spectrogram", "--manifest", str(pipeline["manifest"]), "--out", str(out), "--export-png"])
    assert rc == 0
    npz = np.load(out / "syn0000.npz")
    assert npz["spectrograms"].shape == (12, 19, 26, 91)
    png = out / "syn0000" / "II" / "0.png"
    assert png.exists()
    assert (out / "meta.json").exists()


def test_encode_cache_layout(pipeline):
    meta = json.loads((pipeline["cache"] / "meta.json").read_text())
    assert meta["tau"] == 16
    assert meta["gamma"] == 19
    assert meta["n_leads"] == 12
    assert meta["backend_id"] == "fallback:16:7"
    assert len(list(pipeline["cache"].glob("*.ecgf"))) == 24


def test_encode_stale_cache_exits_2(pipeline):
    rc = run_subcommand([
        "encode", "--manifest", str(pipeline["manifest"]), "--backend", "fallback:16:7",
        "--fusion-input", "per-lead", "--cache", str(pipeline["cache"]),
        "--chunk-overlap", "0.8",
    ])
    assert rc == 2


def test_train_evaluate_predict(pipeline, dataset_dir, capsys):
    work = pipeline["work"]
    ckpt = work / "model.ckpt"
    rc = run_subcommand([
        "train", "--cache", str(pipeline["cache"]), "--fusion", "feature_concat",
        "--model", "dense", "--task", "onset", "--folds", "2", "--seed", "3",
        "--epochs", "6", "--out", str(ckpt),
    ])
    assert rc == 0
    assert ckpt.exists()
    cv = json.loads((work / "model.ckpt.cv.json").read_text())
    assert cv["folds"] == 2
    assert 0.0 <= cv["aggregate"]["auroc_macro"] <= 1.0

    report = work / "eval.json"
    rc = run_subcommand(["evaluate", "--ckpt", str(ckpt), "--cache", str(pipeline["cache"]), "--report", str(report)])
    assert rc == 0
    payload = json.loads(report.read_text())
    assert payload["n_records"] == 24

    capsys.readouterr()
    rc = run_subcommand(["predict", "--ckpt", str(ckpt), "--record", str(dataset_dir / "syn0003.csv")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip())
    assert out["record_id"] == "syn0003"
    assert out["label"] in ("acute", "recent", "old", "normal")
    assert abs(sum(out["probs"].values()) - 1.0) < 1e-6


def test_train_with_stale_cache_exits_2(pipeline):
    conflicting = pipeline["work"] / "conflicting.json"
    conflicting.write_text(json.dumps({"dsp": {"chunk_overlap": 0.8}}))
    rc = run_subcommand([
        "train", "--cache", str(pipeline["cache"]), "--fusion", "feature_concat",
        "--model", "dense", "--task", "onset", "--folds", "2",
        "--config", str(conflicting), "--out", str(pipeline["work"] / "x.ckpt"),
    ])
    assert rc == 2


def test_stacked_encode_and_data_fusion_train(pipeline, tmp_path):
    cache = tmp_path / "stacked_cache"
    rc = run_subcommand([
        "encode", "--manifest", str(pipeline["manifest"]), "--backend", "fallback:16:7",
        "--fusion-input", "stacked", "--cache", str(cache),
    ])
    assert rc == 0
    meta = json.loads((cache / "meta.json").read_text())
    assert meta["n_leads"] == 1
    # train adopts the cache's backend / fusion-input settings automatically
    rc = run_subcommand([
        "train", "--cache", str(cache), "--fusion", "data", "--model", "lstm",
        "--task", "onset", "--folds", "2", "--epochs", "4",
        "--out", str(tmp_path / "m.ckpt"),
    ])
    assert rc == 0


def test_decision_fusion_checkpoint_roundtrip(pipeline, dataset_dir, tmp_path, capsys):
    ckpt = tmp_path / "vote.ckpt"
    rc = run_subcommand([
        "train", "--cache", str(pipeline["cache"]), "--fusion", "decision_vote",
        "--model", "dense", "--task", "onset", "--folds", "2", "--epochs", "2",
        "--out", str(ckpt),
    ])
    assert rc == 0
    from ecgfuse.model import load_checkpoint

    assert len(load_checkpoint(ckpt)["models"]) == 12
    capsys.readouterr()
    rc = run_subcommand(["predict", "--ckpt", str(ckpt), "--record", str(dataset_dir / "syn0001.csv")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip())
    assert abs(sum(out["probs"].values()) - 1.0) < 1e-6


def test_bad_backend_spec_is_config_error(pipeline, tmp_path):
    rc = run_subcommand([
        "encode", "--manifest", str(pipeline["manifest"]), "--backend", "nonsense",
        "--fusion-input", "per-lead", "--cache", str(tmp_path / "c"),
    ])
    assert rc == 2


def test_sweep_emits_comparison_tables(pipeline, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({
        "base": {"train": {"task": "onset", "folds": 2, "epochs": 3, "seed": 1}},
        "fusions": ["feature_concat", "feature_accum"],
        "models": ["dense"],
    }))
    out = tmp_path / "table"
    rc = run_subcommand(["sweep", "--grid", str(grid), "--cache", str(pipeline["cache"]), "--out", str(out)])
    assert rc == 0
    csv_lines = (tmp_path / "table.csv").read_text().splitlines()
    assert csv_lines[0].startswith("method,auroc_acute,auroc_recent,auroc_old,auroc_normal,auroc_macro")
    assert len(csv_lines) == 3
    assert (tmp_path / "table.txt").exists()


def test_unknown_subcommand_exits_2(capsys):
    assert run_subcommand(["frobnicate"]) == 2
    capsys.readouterr()


def test_missing_cache_is_config_error(tmp_path, monkeypatch):
    monkeypatch.delenv("ECGFUSE_CACHE", raising=False)
    rc = run_subcommand([
        "train", "--fusion", "data", "--model", "dense", "--task", "onset",
        "--out", str(tmp_path / "m.ckpt"),
    ])
    assert rc == 2


def test_env_var_cache_root(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("ECGFUSE_CACHE", str(pipeline["cache"]))
    rc = run_subcommand([
        "train", "--fusion", "feature_accum", "--model", "dense", "--task", "binary",
        "--folds", "2", "--epochs", "3", "--out", str(tmp_path / "m.ckpt"),
    ])
    assert rc == 0


def test_full_pipeline_determinism(dataset_dir, tmp_path):
    reports = []
    for run in ("a", "b"):
        work = tmp_path / run
        work.mkdir()
        manifest = work / "manifest.json"
        assert run_subcommand(["ingest", "--input", str(dataset_dir), "--format", "csv", "--out", str(manifest)]) == 0
        assert run_subcommand([
            "encode", "--manifest", str(manifest), "--backend", "fallback:8:1",
            "--fusion-input", "per-lead", "--cache", str(work / "cache"),
        ]) == 0
        assert run_subcommand([
            "train", "--cache", str(work / "cache"), "--fusion", "feature_accum",
            "--model", "dense", "--task", "onset", "--folds", "2", "--seed", "11",
            "--epochs", "4", "--out", str(work / "m.ckpt"),
        ]) == 0
        reports.append((work / "m.ckpt.cv.json").read_bytes())
    assert reports[0] == reports[1]
