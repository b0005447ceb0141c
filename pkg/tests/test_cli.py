import csv
import json

import pytest

import cli
from config import load_run_config, write_run_config
from errors import TrainingDivergedError
from models import AblationConfig
from services import experiment_service
from services.domains import read_header
from tests.conftest import tiny_run_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.env"
    write_run_config(path, tiny_run_config())
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def test_generate_writes_four_domain_sets(tmp_path, config_file):
    out = tmp_path / "run"
    assert run("generate", "--config", config_file, "--out", out) == 0
    for name in ("source_train", "source_test", "target_train", "target_test"):
        assert (out / "data" / f"{name}.bin").exists()
        assert (out / "data" / f"{name}.bin.json").exists()
        assert read_header(out / "data" / f"{name}.bin")["count"] == 30
    assert (out / "run_config.env").exists()


def test_generate_is_bit_reproducible(tmp_path, config_file):
    for name in ("a", "b"):
        assert run("generate", "--config", config_file, "--out", tmp_path / name, "--seed", 4) == 0
    for name in ("source_train", "target_test", "style_target"):
        assert (tmp_path / "a" / "data" / f"{name}.bin").read_bytes() == (tmp_path / "b" / "data" / f"{name}.bin").read_bytes()


def test_missing_prerequisite_is_a_one_line_error(tmp_path, config_file, capsys):
    assert run("train-source", "--config", config_file, "--out", tmp_path / "empty") == 1
    err = capsys.readouterr().err.strip()
    assert "\n" not in err
    assert err.startswith("error: MissingArtifactError: missing artifact")
    assert "source_train.bin" in err and "csft generate" in err


def test_bad_config_is_reported(tmp_path, capsys):
    path = tmp_path / "bad.env"
    path.write_text("SCHEDULE__ROUNDZ=3\n")
    assert run("generate", "--config", path, "--out", tmp_path / "run") == 1
    assert capsys.readouterr().err.startswith("error: ConfigurationError:")


def test_full_pipeline(tmp_path, config_file):
    out = tmp_path / "run"
    for command in ("generate", "train-source"):
        assert run(command, "--config", config_file, "--out", out) == 0
    trained_cis = json.loads((out / "cis_report.json").read_text())
    assert run("select-heads", "--config", config_file, "--out", out) == 0
    replayed = json.loads((out / "cis_report.json").read_text())
    assert replayed == trained_cis
    assert len(replayed["cis"]) * len(replayed["cis"][0]) == 4
    assert replayed["num_selected"] == 1

    for command in ("adapt", "eval", "a-distance"):
        assert run(command, "--config", config_file, "--out", out) == 0

    vendor = [json.loads(line) for line in (out / "vendor_metrics.jsonl").read_text().splitlines()]
    client = [json.loads(line) for line in (out / "client_metrics.jsonl").read_text().splitlines()]
    assert vendor[0]["phase"] == "pretrain"
    assert {r["stage"] for r in client} == {"client"}
    report = json.loads((out / "eval.json").read_text())
    assert set(report) == {"source_model", "adapted_model"}
    assert 0.0 <= report["adapted_model"]["target_acc"] <= 1.0
    gaps = json.loads((out / "a_distance.json").read_text())
    assert 0.0 <= gaps["adapted_model"]["correlation"]["gap"] <= 2.0
    assert load_run_config(out / "run_config.env").seed == 0


def test_reruns_are_bit_identical(tmp_path, config_file):
    for name in ("a", "b"):
        out = tmp_path / name
        for command in ("generate", "train-source"):
            assert run(command, "--config", config_file, "--out", out) == 0
    assert (tmp_path / "a" / "vendor_metrics.jsonl").read_bytes() == (tmp_path / "b" / "vendor_metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "run_config.env").read_bytes() == (tmp_path / "b" / "run_config.env").read_bytes()


def test_resolved_config_reproduces_the_run(tmp_path, config_file):
    first = tmp_path / "first"
    assert run("generate", "--config", config_file, "--out", first, "--seed", 7) == 0
    second = tmp_path / "second"
    assert run("generate", "--config", first / "run_config.env", "--out", second) == 0
    assert (first / "data" / "target_train.bin").read_bytes() == (second / "data" / "target_train.bin").read_bytes()


def test_baseline_flags(tmp_path, config_file):
    out = tmp_path / "run"
    assert run("generate", "--config", config_file, "--out", out) == 0
    assert run("train-source", "--config", config_file, "--out", out, "--no-style") == 0
    assert not (out / "cis_report.json").exists()
    assert run("adapt", "--config", config_file, "--out", out, "--no-style") == 0
    phases = {json.loads(line)["phase"] for line in (out / "client_metrics.jsonl").read_text().splitlines()}
    assert phases == {"task"}


def test_ablate_writes_summary_and_raw_rows(tmp_path, config_file):
    out = tmp_path / "ablation"
    assert run("ablate", "--config", config_file, "--out", out) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "sweep,setting,mean,stderr,n,diverged"
    assert [line.split(",")[:2] for line in lines[1:]] == [["epochs", "1"], ["epochs", "2"]]
    raw = [json.loads(line) for line in (out / "ablation_raw.jsonl").read_text().splitlines()]
    assert len(raw) == 2 and all(r["seed"] == 0 for r in raw)


def test_diverged_settings_are_recorded_not_fatal(tmp_path, config_file, monkeypatch):
    def collapse(*args, **kwargs):
        raise TrainingDivergedError("pseudo-label agreement stayed below chance", {"round": 3, "agreement": 0.0167})

    monkeypatch.setattr(experiment_service, "client_adapt", collapse)
    out = tmp_path / "ablation"
    assert run("ablate", "--config", config_file, "--out", out) == 0
    with open(out / "ablation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(r["setting"], r["n"], r["diverged"], r["mean"]) for r in rows] == [("1", "0", "1", "nan"), ("2", "0", "1", "nan")]
    raw = [json.loads(line) for line in (out / "ablation_raw.jsonl").read_text().splitlines()]
    assert all(r["status"] == "diverged" and r["value"] is None for r in raw)
    assert raw[0]["diagnostics"] == {"round": 3, "agreement": 0.0167}


def test_summary_ignores_diverged_seeds():
    row = experiment_service.summarize("epochs", "2", [0.5, None, 0.7])
    assert row["n"] == 2 and row["diverged"] == 1
    assert row["mean"] == pytest.approx(0.6)


def test_paired_sweep_labels_source_and_target_accuracy():
    config = tiny_run_config(ablation=AblationConfig(seeds=[0], sweeps=["paired"]))
    rows = experiment_service.run_seed_study(config, 0)
    settings = [r["setting"] for r in rows]
    assert settings == [
        "vendor_source/with_style", "vendor_target/with_style",
        "vendor_source/no_style", "vendor_target/no_style",
        "adapted/causal_heads", "domain_gap/causal_heads", "correlation_gap/causal_heads",
        "adapted/im_baseline", "domain_gap/im_baseline", "correlation_gap/im_baseline",
    ]
    assert all(r["sweep"] == "paired" and r["status"] == "ok" for r in rows)
    accuracies = [r["value"] for r in rows if r["setting"].split("/")[0] in ("vendor_source", "vendor_target", "adapted")]
    assert all(0.0 <= v <= 1.0 for v in accuracies)
