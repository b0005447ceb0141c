import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, List

from dotenv import dotenv_values
from fastapi import APIRouter, HTTPException

from config import settings
from models import RunSummary

router = APIRouter(prefix="/runs", tags=["runs"])

METRIC_STAGES = ("vendor", "client")


def _runs_root() -> Path:
    return Path(settings.runs_dir)


def _run_dir(run: str) -> Path:
    root = _runs_root().resolve()
    path = (root / run).resolve()
    if path.parent != root or not (path / "run_config.env").exists():
        raise HTTPException(status_code=404, detail=f"Run '{run}' not found")
    return path


def _artifact(run: str, name: str) -> Path:
    path = _run_dir(run) / name
    if not path.exists():
        raise HTTPException(status_code=404, detail=f"Run '{run}' has no {name}")
    return path


@router.get("", response_model=List[RunSummary])
async def list_runs() -> List[RunSummary]:
    root = _runs_root()
    if not root.exists():
        return []
    return [
        RunSummary(name=path.name, artifacts=sorted(p.name for p in path.iterdir() if p.is_file()))
        for path in sorted(root.iterdir())
        if (path / "run_config.env").exists()
    ]


@router.get("/{run}/config")
async def get_config(run: str) -> Dict[str, Any]:
    return dict(dotenv_values(_artifact(run, "run_config.env")))


@router.get("/{run}/metrics/{stage}")
async def get_metrics(run: str, stage: str) -> List[Dict[str, Any]]:
    if stage not in METRIC_STAGES:
        raise HTTPException(status_code=404, detail=f"Unknown stage '{stage}'")
    lines = _artifact(run, f"{stage}_metrics.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


@router.get("/{run}/cis")
async def get_cis(run: str) -> Dict[str, Any]:
    return json.loads(_artifact(run, "cis_report.json").read_text())


@router.get("/{run}/eval")
async def get_eval(run: str) -> Dict[str, Any]:
    return json.loads(_artifact(run, "eval.json").read_text())


@router.get("/{run}/ablation")
async def get_ablation(run: str) -> Dict[str, Any]:
    with open(_artifact(run, "ablation.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        mean = float(row["mean"])
        # a setting that diverged on every seed has no mean
        row["mean"] = None if math.isnan(mean) else mean
        row["stderr"] = float(row["stderr"])
        row["n"] = int(row["n"])
        row["diverged"] = int(row.get("diverged") or 0)
    return {"run": run, "rows": rows}
