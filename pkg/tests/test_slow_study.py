"""Five-seed paired study and epoch sweep on the desk-sized configuration."""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from config import load_run_config
from services.experiment_service import ExperimentService

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.env"
SEEDS = [0, 1, 2, 3, 4]

pytestmark = pytest.mark.slow


def desk_config(sweeps):
    config = load_run_config(DESK_CONFIG)
    return config.model_copy(update={"ablation": config.ablation.model_copy(update={"seeds": SEEDS, "sweeps": sweeps})})


@pytest.fixture(scope="module")
def paired(tmp_path_factory):
    out = tmp_path_factory.mktemp("paired")
    started = time.perf_counter()
    ExperimentService(desk_config(["paired"]), out).ablate()
    elapsed = time.perf_counter() - started
    rows = [json.loads(line) for line in (out / "ablation_raw.jsonl").read_text().splitlines()]
    return rows, elapsed


def per_seed(rows, setting):
    values = {r["seed"]: r["value"] for r in rows if r["setting"] == setting}
    return np.array([values[seed] for seed in SEEDS])


def test_paired_study_fits_on_a_desk(paired):
    rows, elapsed = paired
    assert elapsed < 30 * 60
    assert not [r for r in rows if r["status"] == "diverged"]


def test_style_training_does_not_cost_source_accuracy(paired):
    rows, _ = paired
    assert per_seed(rows, "vendor_source/with_style").mean() >= per_seed(rows, "vendor_source/no_style").mean()


def test_causal_heads_beat_the_im_baseline_on_target(paired):
    rows, _ = paired
    assert per_seed(rows, "adapted/causal_heads").mean() >= per_seed(rows, "adapted/im_baseline").mean() + 0.02


def test_causal_heads_shrink_the_domain_gap(paired):
    rows, _ = paired
    wins = per_seed(rows, "domain_gap/causal_heads") < per_seed(rows, "domain_gap/im_baseline")
    assert wins.sum() >= 4


def test_causal_heads_preserve_correlations(paired):
    rows, _ = paired
    assert per_seed(rows, "correlation_gap/causal_heads").mean() <= per_seed(rows, "correlation_gap/im_baseline").mean()


@pytest.fixture(scope="module")
def epoch_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("epochs")
    ExperimentService(desk_config(["epochs"]), out).ablate()
    with open(out / "ablation.csv", newline="") as f:
        return list(csv.DictReader(f))


def test_one_epoch_per_round_is_worst_and_two_is_enough(epoch_sweep):
    assert [row["setting"] for row in epoch_sweep] == ["1", "2", "3", "5"]
    assert all(row["diverged"] == "0" for row in epoch_sweep)
    mean = {row["setting"]: float(row["mean"]) for row in epoch_sweep}
    assert mean["1"] < min(mean["2"], mean["3"], mean["5"])
    assert abs(mean["2"] - mean["3"]) <= 0.015
    assert abs(mean["2"] - mean["5"]) <= 0.015
