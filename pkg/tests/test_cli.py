import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from seaice.cli import EXIT_DATA, EXIT_OK, EXIT_TRAIN, EXIT_USAGE, discover_scenes, load_config, main

from oracles import brute_scores

CONFIG = str(Path(__file__).resolve().parents[1] / "configs" / "fixture.toml")
GOLDEN = Path(__file__).parent / "golden" / "worked_example_metrics.json"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("fixtures", root, "--size", 128) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def pipeline(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    common = ["--config", CONFIG, "--out", out]
    assert run("prepare", dataset, *common) == EXIT_OK
    assert run("train", *common, "--init", "random", "--runs", 2, "--max-epochs", 2) == EXIT_OK
    assert run("train", *common, "--init", "pretrained", "--pretrained", dataset / "encoder_weights.pt",
               "--max-epochs", 2) == EXIT_OK
    assert run("evaluate", *common) == EXIT_OK
    assert run("report", *common) == EXIT_OK
    return out


# ---------------------------------------------------------------- exit codes


def test_no_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run()
    assert exc.value.code == EXIT_USAGE


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("train", "--bogus")
    assert exc.value.code == EXIT_USAGE


def test_missing_dataset_root_is_data_error(tmp_path):
    assert run("prepare", tmp_path / "nope", "--out", tmp_path / "o") == EXIT_DATA


def test_no_dataset_root_at_all(tmp_path, monkeypatch):
    monkeypatch.delenv("SEAICE_DATA_ROOT", raising=False)
    assert run("prepare", "--out", tmp_path / "o") == EXIT_USAGE


def test_dataset_root_from_environment(tmp_path, monkeypatch, dataset):
    monkeypatch.setenv("SEAICE_DATA_ROOT", str(dataset))
    assert run("prepare", "--config", CONFIG, "--out", tmp_path / "o") == EXIT_OK


def test_missing_pretrained_file_fails_before_training(tmp_path):
    # the working directory is not even prepared: the weight check must come first
    assert run("train", "--init", "pretrained", "--pretrained", tmp_path / "none.pt", "--out", tmp_path) == EXIT_USAGE
    assert run("train", "--init", "pretrained", "--out", tmp_path) == EXIT_USAGE


def test_unprepared_directory_is_data_error(tmp_path):
    assert run("train", "--out", tmp_path) == EXIT_DATA


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[train]\nlearning_rate = 1.0\n")
    assert run("schema", "--config", cfg) == EXIT_USAGE
    cfg.write_text("[optimizer]\nx = 1\n")
    with pytest.raises(ValueError, match="optimizer"):
        load_config(cfg)


def test_training_failure_exit_code(pipeline, tmp_path, monkeypatch):
    import seaice.trainer as trainer

    out = tmp_path / "o"
    shutil.copytree(pipeline, out, ignore=shutil.ignore_patterns("runs", "report"))

    def explode(*a, **k):
        raise trainer.TrainingError("non-finite training loss at epoch 1")

    monkeypatch.setattr(trainer, "train", explode)
    assert run("train", "--config", CONFIG, "--out", out) == EXIT_TRAIN
    manifest = json.loads((out / "runs" / "random_seed0" / "run_manifest.json").read_text())
    assert manifest["status"] == "failed" and "non-finite" in manifest["error"]


def test_concurrent_training_refused(pipeline, tmp_path):
    from filelock import FileLock

    out = tmp_path / "o"
    shutil.copytree(pipeline, out, ignore=shutil.ignore_patterns("runs", "report"))
    with FileLock(str(out / "train.lock")):
        assert run("train", "--config", CONFIG, "--out", out, "--max-epochs", 1) == EXIT_USAGE


def test_schema_lists_encoder_keys(capsys):
    assert run("schema") == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert schema["conv1.weight"] == [64, 3, 7, 7]
    assert not any(k.startswith("layer4") for k in schema)


# ---------------------------------------------------------------- prepare


def test_discover_scenes(dataset):
    found = discover_scenes(dataset)
    assert [(s["id"], s["month"]) for s in found] == [("2018-01", 1), ("2018-02", 2), ("2018-07", 7)]


def test_prepare_outputs(pipeline):
    split = json.loads((pipeline / "split.json").read_text())
    assert split["test"] == ["2018-01", "2018-07"]
    assert len(split["validation"]) == 1 and split["validation_half"] == "south"
    patches = json.loads((pipeline / "patches.json").read_text())
    assert len(patches["windows"]) == 8
    report = json.loads((pipeline / "ingest_report.json").read_text())
    assert report["missing_months"] == [3, 4, 5, 6, 8, 9, 10, 11, 12]


def test_prepare_is_byte_identical(dataset, tmp_path):
    for d in ("a", "b"):
        assert run("prepare", dataset, "--config", CONFIG, "--out", tmp_path / d) == EXIT_OK
    for name in ("split.json", "patches.json", "ingest_report.json", "scenes/2018-02.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


# ---------------------------------------------------------------- evaluate / report


def test_evaluate_outputs(pipeline):
    ev = pipeline / "runs" / "random_seed0" / "eval" / "2018-01"
    for name in ("classmap.tif", "errormask.tif", "errormask.png", "confusion.csv", "confusion.png", "metrics.json"):
        assert (ev / name).exists(), name
    manifest = json.loads((pipeline / "runs" / "random_seed0" / "run_manifest.json").read_text())
    assert manifest["status"] == "evaluated"
    assert set(manifest["metrics"]) == {"2018-01", "2018-07"}


def test_evaluate_twice_is_identical(pipeline, tmp_path):
    out = tmp_path / "o"
    shutil.copytree(pipeline, out)
    before = (out / "metrics.csv").read_bytes()
    ev = out / "runs" / "pretrained_seed0" / "eval" / "2018-07"
    files = {n: (ev / n).read_bytes() for n in ("metrics.json", "classmap.tif", "confusion.csv", "errormask.png")}
    assert run("evaluate", "--config", CONFIG, "--out", out) == EXIT_OK
    assert (out / "metrics.csv").read_bytes() == before
    for n, data in files.items():
        assert (ev / n).read_bytes() == data, n


def test_metrics_files_match_oracle(pipeline):
    for path in sorted(pipeline.glob("runs/*/eval/*/metrics.json")):
        rep = json.loads(path.read_text())
        ref = brute_scores(rep["confusion"])
        for key in ("weighted_f1", "micro_iou", "macro_iou", "weighted_iou"):
            assert rep[key] == pytest.approx(ref[key], abs=1e-12)


def test_golden_worked_example():
    from seaice.metrics import ConfusionMatrix, metrics_report

    golden = json.loads(GOLDEN.read_text())
    rep = metrics_report(ConfusionMatrix(golden["confusion"])).to_json()
    for key in ("f1", "iou", "macro_f1", "weighted_f1", "micro_iou", "macro_iou", "weighted_iou"):
        assert rep[key] == pytest.approx(golden[key], abs=1e-12), key


def test_report_rows_are_run_means(pipeline):
    report = json.loads((pipeline / "report" / "report.json").read_text())
    assert [(r["scene"], r["strategy"]) for r in report["rows"]] == [
        ("2018-01", "random"), ("2018-01", "pretrained"), ("2018-07", "random"), ("2018-07", "pretrained"),
    ]
    for row in report["rows"]:
        files = sorted(pipeline.glob(f"runs/{row['strategy']}_seed*/eval/{row['scene']}/metrics.json"))
        refs = [brute_scores(json.loads(f.read_text())["confusion"]) for f in files]
        assert row["runs"] == len(files) == (2 if row["strategy"] == "random" else 1)
        expect = [np.mean([r[k] for r in refs]) for k in ("weighted_f1", "micro_iou", "macro_iou", "weighted_iou")]
        assert row["values"] == pytest.approx(expect, abs=1e-12)


def test_report_table_layout(pipeline):
    md = (pipeline / "report" / "table.md").read_text()
    assert md.splitlines()[0] == "| Test scene | Setup | Average F1 | Micro avg IOU | Macro avg IOU | Weighted IOU |"
    assert "| January test scene | Randomly initialized |" in md
    assert "| July test scene | Pre-trained |" in md
    assert (pipeline / "report" / "confusion_2018-01_random.png").exists()


def test_report_rejects_mixed_configs(pipeline, tmp_path):
    out = tmp_path / "o"
    shutil.copytree(pipeline, out)
    mpath = out / "runs" / "pretrained_seed0" / "run_manifest.json"
    m = json.loads(mpath.read_text())
    m["train_config"]["batch_size"] = 99
    mpath.write_text(json.dumps(m))
    assert run("report", "--out", out) == EXIT_USAGE


def test_report_detects_tampered_metrics(pipeline, tmp_path):
    out = tmp_path / "o"
    shutil.copytree(pipeline, out)
    path = out / "runs" / "random_seed0" / "eval" / "2018-01" / "metrics.json"
    path.write_text(path.read_text().replace('"weighted_f1": 0', '"weighted_f1": 1', 1))
    assert run("report", "--out", out) == EXIT_USAGE


def test_predict_verb(pipeline):
    ckpt = pipeline / "runs" / "random_seed0" / "best.pt"
    assert run("predict", "--out", pipeline, "--checkpoint", ckpt, "--scene", "2018-07", "--mode", "tiled:64:16") == EXIT_OK
    dest = pipeline / "predictions" / "2018-07"
    assert (dest / "classmap.tif").exists() and (dest / "provenance.json").exists()
    assert run("predict", "--out", pipeline, "--checkpoint", ckpt, "--scene", "2099-01") == EXIT_DATA
