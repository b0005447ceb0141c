#!/usr/bin/env python3
"""
Experiment runner.

    python cli.py generate --config configs/default.env --out runs/demo
    python cli.py train-source --out runs/demo
    python cli.py select-heads --out runs/demo
    python cli.py adapt --out runs/demo
    python cli.py eval --out runs/demo
    python cli.py a-distance --out runs/demo
    python cli.py ablate --config configs/default.env --out runs/ablation
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import load_run_config, settings
from errors import CsftError
from services.experiment_service import ExperimentService

COMMANDS = ("generate", "train-source", "select-heads", "adapt", "eval", "ablate", "a-distance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csft", description="Causal/non-causal head ViT experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="RunConfig key-value file")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", type=Path, default=None, help="run directory")
    parser.add_argument(
        "--no-style", action="store_true", help="baseline: train-source/adapt without the style task"
    )
    return parser


def _print_cis(report) -> None:
    cis = np.asarray(report.cis)
    mask = np.asarray(report.mask)
    print(f"   CIS grid ({cis.shape[0]} blocks x {cis.shape[1]} heads, * = non-causal):")
    for block, (row, marks) in enumerate(zip(cis, mask)):
        cells = "  ".join(f"{value:+.4f}{'*' if marked else ' '}" for value, marked in zip(row, marks))
        print(f"   block {block}: {cells}")
    print(f"   selected {report.num_selected} heads (lambda={report.lam}, tau={report.tau})")


def run(args: argparse.Namespace) -> None:
    config = load_run_config(args.config)
    out = args.out or Path(settings.runs_dir) / "default"
    service = ExperimentService(config, out, seed=args.seed)
    command = args.command

    if command == "generate":
        counts = service.generate()
        print(f"✅ Generated datasets in {service.path('data')}")
        for name, count in counts.items():
            print(f"   {name}: {count}")
    elif command == "train-source":
        report = service.train_source(style_task=not args.no_style)
        print(f"✅ Source model written to {service.path('models', 'source_model.ckpt')}")
        if report is not None:
            _print_cis(report)
    elif command == "select-heads":
        report = service.select_heads()
        print(f"✅ CIS report written to {service.path('cis_report.json')}")
        _print_cis(report)
    elif command == "adapt":
        records = service.adapt(style_task=not args.no_style)
        last = [r for r in records if r.phase == "task"]
        print(f"✅ Adapted model written to {service.path('models', 'adapted_model.ckpt')}")
        if last and last[-1].target_acc is not None:
            print(f"   final target accuracy: {last[-1].target_acc:.4f}")
    elif command == "eval":
        report = service.evaluate()
        print(f"✅ Evaluation written to {service.path('eval.json')}")
        for stage, values in report.items():
            print(f"   {stage}: source {values['source_acc']:.4f}  target {values['target_acc']:.4f}")
    elif command == "a-distance":
        report = service.a_distance()
        print(f"✅ A-distance report written to {service.path('a_distance.json')}")
        for stage, values in report.items():
            print(
                f"   {stage}: domain gap {values['domain_gap']['value']:.4f}  "
                f"correlation gap {values['correlation']['gap']:.4f}"
            )
    elif command == "ablate":
        summary = service.ablate()
        print(f"✅ Ablation written to {service.path('ablation.csv')}")
        for row in summary:
            print(f"   {row['sweep']:<8} {row['setting']:<26} {row['mean']:.4f} ± {row['stderr']:.4f} (n={row['n']})")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except (CsftError, ValueError, IndexError) as e:
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
