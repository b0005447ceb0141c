#!/usr/bin/env python3
"""
Smoke test for the experiment pipeline.
Runs every CLI stage on a tiny configuration in a temporary run directory
and checks that each stage leaves its artifacts behind.
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import cli  # noqa: E402
from config import write_run_config  # noqa: E402
from models import (  # noqa: E402
    AblationConfig,
    CausalGraphParams,
    DataConfig,
    RunConfig,
    SelectionConfig,
    TrainSchedule,
    ViTConfig,
)

STAGES = [
    ("generate", ["data/source_train.bin", "data/target_test.bin", "data/style_target.bin"]),
    ("train-source", ["models/source_model.ckpt", "models/warm_start.ckpt", "vendor_metrics.jsonl", "cis_report.json"]),
    ("select-heads", ["cis_report.json"]),
    ("adapt", ["models/adapted_model.ckpt", "client_metrics.jsonl"]),
    ("eval", ["eval.json"]),
    ("a-distance", ["a_distance.json"]),
]


def tiny_config() -> RunConfig:
    return RunConfig(
        vit=ViTConfig(image_size=16, patch_size=8, embed_dim=16, num_blocks=2, heads_per_block=2),
        source=CausalGraphParams(image_size=16),
        target=CausalGraphParams(image_size=16, pairing_shift=1),
        data=DataConfig(source_size=80, target_size=80, train_fraction=0.5),
        selection=SelectionConfig(tau=-1.0, beta_epochs=1),
        schedule=TrainSchedule(
            rounds=2, pretrain_epochs=2, task_epochs_per_round=1, style_max_epochs_per_round=2, batch_size=16
        ),
        ablation=AblationConfig(seeds=[0], sweeps=["epochs"], epoch_values=[1, 2]),
    )


class PipelineTester:
    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.config_path = run_dir.parent / "smoke.env"
        write_run_config(self.config_path, tiny_config())

    def run_stage(self, command, artifacts):
        print(f"\n🔧 Running {command}...")
        code = cli.main([command, "--config", str(self.config_path), "--out", str(self.run_dir)])
        if code != 0:
            print(f"❌ {command} exited with {code}")
            return False
        missing = [a for a in artifacts if not (self.run_dir / a).exists()]
        if missing:
            print(f"❌ {command} did not write {', '.join(missing)}")
            return False
        print(f"✅ {command} wrote {len(artifacts)} artifact(s)")
        return True

    def test_cis_report(self):
        print("\n🔍 Checking CIS report...")
        report = json.loads((self.run_dir / "cis_report.json").read_text())
        cis = [value for row in report["cis"] for value in row]
        if not all(-1.0 <= value <= 1.0 for value in cis):
            print("❌ CIS values outside [-1, 1]")
            return False
        print(f"✅ {report['num_selected']} of {len(cis)} heads marked non-causal")
        return True

    def test_eval(self):
        print("\n📊 Checking evaluation...")
        report = json.loads((self.run_dir / "eval.json").read_text())
        for stage, values in report.items():
            print(f"   {stage}: source {values['source_acc']:.3f}  target {values['target_acc']:.3f}")
        if "adapted_model" not in report:
            print("❌ adapted model missing from eval.json")
            return False
        print("✅ Evaluation complete")
        return True

    def test_ablation(self):
        print("\n🧪 Running a one-seed epoch sweep...")
        out = self.run_dir.parent / "ablation"
        code = cli.main(["ablate", "--config", str(self.config_path), "--out", str(out)])
        if code != 0 or not (out / "ablation.csv").exists():
            print("❌ ablation failed")
            return False
        print("✅ Ablation summary written")
        return True

    def run_all_tests(self):
        print("🚀 Starting pipeline smoke test")
        print("=" * 50)
        results = [self.run_stage(command, artifacts) for command, artifacts in STAGES]
        if all(results):
            results += [self.test_cis_report(), self.test_eval(), self.test_ablation()]

        print("\n" + "=" * 50)
        passed = sum(results)
        print(f"📋 {passed}/{len(results)} checks passed")
        if passed == len(results):
            print("🎉 Pipeline smoke test passed")
            return True
        print("⚠️  Pipeline smoke test failed")
        return False


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tester = PipelineTester(Path(tmp) / "run")
        sys.exit(0 if tester.run_all_tests() else 1)


if __name__ == "__main__":
    main()
