import csv
import json

import pytest
import yaml

from mtss.cli import EXIT_CONFIG, EXIT_DATA, EXIT_EXISTS, EXIT_OK, main
from mtss.config import ConfigError
from mtss.experiments import RunConfig, load_run_config

TINY = {
    "seed": 0,
    "data": {
        "labeled": {"image_size": 16, "n_colors": 3, "n_shapes": 3, "n_patterns": 2, "n_textures": 2,
                    "n_images": 150, "seed": 1},
        "unlabeled": {"image_size": 16, "n_colors": 3, "n_shapes": 3, "n_patterns": 2, "n_textures": 2,
                      "n_images": 60, "seed": 2},
        "target_domain": {"image_size": 16, "n_colors": 3, "n_shapes": 3, "n_patterns": 2, "n_textures": 2,
                          "n_images": 30, "seed": 3},
    },
    "teacher": {"dim": 8, "epochs": 1, "batch_size": 16, "samples_per_epoch": 64},
    "student": {"dim": 8, "epochs": 1, "batch_size": 16, "samples_per_epoch": 64, "warmup_images": 0,
                "backbone_preset": "small"},
    "experiment": {"ks": [1, 3]},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_smoke_pipeline(cfg_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["gen-data", str(cfg_path), "--out", str(out)]) == EXIT_OK
    assert (out / "data" / "labeled" / "manifest.jsonl").exists()
    manifest = json.loads((out / "data" / "run_manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 16
    # re-running refuses unless forced
    assert main(["gen-data", str(cfg_path), "--out", str(out)]) == EXIT_EXISTS
    assert main(["gen-data", str(cfg_path), "--out", str(out), "--overwrite"]) == EXIT_OK

    types = ["color", "shape", "pattern", "texture"]
    for t in types:
        assert main(["train-teacher", str(cfg_path), "--out", str(out), "--type", t]) == EXIT_OK
    teachers = [str(out / "teachers" / t) for t in types]
    assert main(["train-student", str(cfg_path), "--out", str(out), "--teachers", *teachers]) == EXIT_OK
    assert main(["evaluate", str(cfg_path), "--out", str(out), "--model", str(out / "student"),
                 "--k", "1,3"]) == EXIT_OK
    report = json.loads((out / "eval" / "student" / "report.json").read_text())
    assert set(report["per_type"]) == set(types)
    assert (out / "eval" / "student" / "predictions.jsonl").exists()

    img = next((out / "data" / "labeled" / "images").iterdir())
    capsys.readouterr()
    assert main(["predict", "--model", str(out / "student"), "--image", str(img), "--k", "2"]) == EXIT_OK
    pred = json.loads(capsys.readouterr().out)
    assert set(pred) == set(types) and len(pred["color"]) == 2

    emb = tmp_path / "emb.txt"
    assert main(["export-embeddings", "--model", str(out / "student"), "--manifest",
                 str(out / "data" / "labeled" / "manifest.jsonl"), "--type", "pattern", "--out", str(emb)]) == EXIT_OK
    lines = emb.read_text().splitlines()
    assert lines[0].startswith("# mtss-embeddings type=pattern rows=150 dim=8")
    rid, vec = lines[1].split("\t")
    assert len(vec.split()) == 8


def test_same_seed_same_report(cfg_path, tmp_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train-teacher", str(cfg_path), "--out", str(out), "--type", "shape"]) == EXIT_OK
        assert main(["evaluate", str(cfg_path), "--out", str(out), "--model", str(out / "teachers" / "shape")]) == 0
        reports.append((out / "eval" / "shape" / "report.json").read_bytes())
    assert reports[0] == reports[1]


def test_sweep_gamma_table(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", str(cfg_path), "--out", str(out), "--param", "gamma", "--values", "0,1,2"]) == EXIT_OK
    with open(out / "reports" / "sweep_gamma.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "gamma"
    assert [float(r[0]) for r in rows[1:]] == [0.0, 1.0, 2.0]
    n_types = (len(rows[0]) - 1) // 2
    # deltas are measured against gamma = 0
    assert all(float(v) == 0.0 for v in rows[1][1 + n_types:])
    teacher_runs = list((out / "teachers").iterdir())
    assert len(teacher_runs) == 3


def test_unlabeled_sweep_plan_schema(cfg_path, tmp_path):
    doc = dict(TINY, experiment={"ks": [1, 3], "sizes": [20, 40, 60]})
    p = tmp_path / "sweep.yaml"
    p.write_text(yaml.safe_dump(doc))
    out = tmp_path / "plan"
    assert main(["experiment", str(p), "--out", str(out), "--plan", "unlabeled_sweep"]) == EXIT_OK
    with open(out / "reports" / "unlabeled_sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["T", "S-20", "S-40", "S-60"]
    assert (out / "reports" / "unlabeled_sweep.txt").exists()


def test_missing_model_is_data_error(tmp_path, capsys):
    img = tmp_path / "x.png"
    assert main(["predict", "--model", str(tmp_path / "nope"), "--image", str(img)]) == EXIT_DATA
    assert "not found" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"teacher": {"learning_rate": 0.1}}))
    assert main(["gen-data", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "unknown keys" in capsys.readouterr().err
    bad.write_text(yaml.safe_dump({"bogus": 1}))
    assert main(["gen-data", str(bad)]) == EXIT_CONFIG
    bad.write_text(yaml.safe_dump({"data": {"labeled": {"image_size": 4}}}))
    assert main(["gen-data", str(bad), "--out", str(tmp_path / "o2")]) == EXIT_CONFIG
    assert main(["gen-data", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main(["sweep", str(bad), "--param", "momentum", "--values", "1"]) == EXIT_CONFIG


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict(TINY)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_run_config(p) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"experiment": {"plans": []}})


def test_env_output_root(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("MTSS_OUTPUT_ROOT", str(tmp_path / "envroot"))
    assert main(["gen-data", str(cfg_path)]) == EXIT_OK
    assert (tmp_path / "envroot" / "tiny" / "data" / "labeled" / "manifest.jsonl").exists()
