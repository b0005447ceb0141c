"""
Pipeline stages behind the CLI. Every stage reads its inputs from the run
directory and writes its outputs back there, so any stage can be re-run on
its own once its prerequisites exist.
"""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
from joblib import Parallel, delayed

from config import resolve_run_config, settings, stream_seed, write_run_config
from errors import MissingArtifactError, TrainingDivergedError
from models import AugmentParams, CisReport, MetricsRecord, RunConfig, TrainSchedule
from services.domains import (
    DomainDataset,
    StyleDataset,
    empirical_mutual_information,
    load_dataset,
    sample_domain,
    save_dataset,
)
from services.head_selection import select_heads
from services.metrics import (
    accuracy,
    class_token_domain_gap,
    correlation_preservation,
    evaluate_model,
)
from services.stylization import build_style_dataset
from services.training import client_adapt, vendor_train
from services.vit import ViTModel, load_model, save_model

logger = logging.getLogger(__name__)

DATA_FILES = ("source_train", "source_test", "target_train", "target_test")
STYLE_FILES = ("style_source", "style_target")
ABLATION_COLUMNS = ("sweep", "setting", "mean", "stderr", "n", "diverged")


@dataclass
class DataBundle:
    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset
    style_source: StyleDataset
    style_target: StyleDataset


def generate_data(config: RunConfig) -> DataBundle:
    source_train, source_test = sample_domain(config.source, config.data.source_size).split(config.data.train_fraction)
    target_train, target_test = sample_domain(config.target, config.data.target_size).split(config.data.train_fraction)
    style_source = build_style_dataset(source_train, config.augment, config.augment.seed)
    # the client augments its own images; no labels travel with them
    style_target = build_style_dataset(
        DomainDataset(images=target_train.images), config.augment, config.augment.seed
    )
    return DataBundle(source_train, source_test, target_train, target_test, style_source, style_target)


def style_split(style: StyleDataset, schedule: TrainSchedule):
    return style.split(1.0 - schedule.style_holdout_fraction)


def new_model(config: RunConfig, augment: Optional[AugmentParams] = None) -> ViTModel:
    vit = config.vit
    if augment is not None:
        vit = vit.model_copy(update={"num_styles": augment.num_styles})
    return ViTModel(vit, seed=stream_seed(config.seed, "model"))


def write_jsonl(path: Path, records: List[MetricsRecord]) -> None:
    path.write_text("".join(record.model_dump_json() + "\n" for record in records))


def stderr(values: List[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def summarize(sweep: str, setting: str, values: List[Optional[float]]) -> Dict[str, Any]:
    """Mean and standard error over the finished seeds; diverged seeds are only counted."""
    finished = [v for v in values if v is not None]
    return {
        "sweep": sweep,
        "setting": setting,
        "mean": float(np.mean(finished)) if finished else float("nan"),
        "stderr": stderr(finished),
        "n": len(finished),
        "diverged": len(values) - len(finished),
    }


class ExperimentService:
    def __init__(self, config: RunConfig, run_dir: Union[str, Path], seed: Optional[int] = None):
        self.config = resolve_run_config(config, seed)
        self.run_dir = Path(run_dir)

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def _require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, hint)
        return path

    def _rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng(stream_seed(self.config.seed, stream))

    def _prepare(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(self.path("run_config.env"), self.config)

    def _load(self, name: str) -> DomainDataset:
        return load_dataset(self._require(self.path("data", f"{name}.bin"), "csft generate"))

    def generate(self) -> Dict[str, int]:
        self._prepare()
        bundle = generate_data(self.config)
        counts = {}
        for name in DATA_FILES + STYLE_FILES:
            dataset = getattr(bundle, name)
            sidecar: Dict[str, Any] = {"name": name, "count": len(dataset)}
            if dataset.latents is not None:
                sidecar["mutual_information_sz"] = empirical_mutual_information(
                    dataset.latents[:, 0], dataset.latents[:, 1]
                )
            save_dataset(self.path("data", f"{name}.bin"), dataset, sidecar)
            counts[name] = len(dataset)
        logger.info("generated datasets in %s", self.path("data"))
        return counts

    def _source_evaluator(self, source_test: DomainDataset):
        return lambda model: accuracy(model, source_test)

    def train_source(self, style_task: bool = True) -> CisReport:
        self._prepare()
        source_train, source_test = self._load("source_train"), self._load("source_test")
        style_train, style_holdout = style_split(self._load("style_source"), self.config.schedule)
        model = new_model(self.config)
        result = vendor_train(
            model,
            source_train,
            style_train,
            style_holdout,
            self.config.schedule,
            self.config.selection,
            self._rng("vendor"),
            seed=self.config.seed,
            style_task=style_task,
            evaluate=self._source_evaluator(source_test),
            select_rng=self._rng("select"),
        )
        models_dir = self.path("models")
        warm = new_model(self.config)
        warm.load_state_dict(result.warm_start)
        save_model(models_dir / "warm_start.ckpt", warm)
        save_model(models_dir / "source_model.ckpt", result.model, result.mask)
        write_jsonl(self.path("vendor_metrics.jsonl"), result.records)
        if result.cis_report is not None:
            self.path("cis_report.json").write_text(result.cis_report.model_dump_json(indent=2))
        return result.cis_report

    def select_heads(self) -> CisReport:
        """Replays head selection on the warm-start checkpoint."""
        self._prepare()
        source_train = self._load("source_train")
        model, _ = load_model(self._require(self.path("models", "warm_start.ckpt"), "csft train-source"))
        report = select_heads(model, source_train, self.config.selection, self._rng("select"))
        self.path("cis_report.json").write_text(report.model_dump_json(indent=2))
        return report

    def adapt(self, style_task: bool = True) -> List[MetricsRecord]:
        self._prepare()
        model, mask = load_model(self._require(self.path("models", "source_model.ckpt"), "csft train-source"))
        target_train = self._load("target_train").unlabeled()
        target_test = self._load("target_test")
        style_train, style_holdout = style_split(self._load("style_target"), self.config.schedule)
        result = client_adapt(
            model,
            mask if style_task else None,
            target_train,
            style_train,
            style_holdout,
            self.config.schedule,
            self._rng("client"),
            seed=self.config.seed,
            style_task=style_task,
            evaluate=lambda m: accuracy(m, target_test),
        )
        save_model(self.path("models", "adapted_model.ckpt"), result.model, mask)
        write_jsonl(self.path("client_metrics.jsonl"), result.records)
        return result.records

    def _trained_models(self) -> Dict[str, ViTModel]:
        models = {}
        for stage, name in (("source_model", "source_model.ckpt"), ("adapted_model", "adapted_model.ckpt")):
            path = self.path("models", name)
            if path.exists():
                models[stage] = load_model(path)[0]
        if not models:
            raise MissingArtifactError(self.path("models", "source_model.ckpt"), "csft train-source")
        return models

    def evaluate(self) -> Dict[str, Any]:
        self._prepare()
        source_test, target_test = self._load("source_test"), self._load("target_test")
        report = {
            stage: evaluate_model(model, stage, source_test, target_test).model_dump()
            for stage, model in self._trained_models().items()
        }
        self.path("eval.json").write_text(json.dumps(report, indent=2))
        return report

    def a_distance(self) -> Dict[str, Any]:
        self._prepare()
        source_test, target_test = self._load("source_test"), self._load("target_test")
        seed = stream_seed(self.config.seed, "metrics")
        report = {}
        for stage, model in self._trained_models().items():
            report[stage] = {
                "domain_gap": class_token_domain_gap(
                    model, source_test.images, target_test.images, self.config.augment, seed
                ).model_dump(),
                "correlation": correlation_preservation(
                    model, source_test.images, target_test.images, seed
                ).model_dump(),
            }
        self.path("a_distance.json").write_text(json.dumps(report, indent=2))
        return report

    def ablate(self) -> List[Dict[str, Any]]:
        self._prepare()
        seeds = self.config.ablation.seeds
        jobs = (delayed(run_seed_study)(self.config, seed) for seed in seeds)
        per_seed = Parallel(n_jobs=max(1, settings.workers))(jobs)

        raw = [row for rows in per_seed for row in rows]
        with open(self.path("ablation_raw.jsonl"), "w") as f:
            for row in raw:
                f.write(json.dumps(row) + "\n")

        grouped: Dict[tuple, List[Optional[float]]] = {}
        for row in raw:
            grouped.setdefault((row["sweep"], row["setting"]), []).append(row["value"])
        summary = [summarize(sweep, setting, values) for (sweep, setting), values in grouped.items()]
        with open(self.path("ablation.csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
            writer.writeheader()
            writer.writerows(summary)
        return summary


def _vendor(config: RunConfig, data: DataBundle, warm_start, seed: int, style_task: bool = True,
            augment: Optional[AugmentParams] = None, style: Optional[StyleDataset] = None):
    model = new_model(config, augment)
    model.load_state_dict(warm_start, strict=False)
    style_train, style_holdout = style_split(style if style is not None else data.style_source, config.schedule)
    schedule = config.schedule.model_copy(update={"pretrain_epochs": 0})
    return vendor_train(
        model, data.source_train, style_train, style_holdout, schedule, config.selection,
        np.random.default_rng(stream_seed(seed, "vendor")), seed=seed, style_task=style_task,
        select_rng=np.random.default_rng(stream_seed(seed, "select")),
    )


def _client(config: RunConfig, data: DataBundle, vendor, seed: int, style_task: bool = True,
            schedule: Optional[TrainSchedule] = None, style: Optional[StyleDataset] = None):
    schedule = schedule or config.schedule
    style_train, style_holdout = style_split(style if style is not None else data.style_target, schedule)
    return client_adapt(
        vendor.model, vendor.mask if style_task else None, data.target_train.unlabeled(),
        style_train, style_holdout, schedule, np.random.default_rng(stream_seed(seed, "client")),
        seed=seed, style_task=style_task,
    ).model


def run_seed_study(base: RunConfig, seed: int) -> List[Dict[str, Any]]:
    """
    Every ablation value for one seed, as flat rows. A setting whose training
    diverges leaves a row with `value=None`, `status="diverged"` and the
    divergence diagnostics instead of aborting the study.
    """
    config = resolve_run_config(base, seed)
    data = generate_data(config)
    sweeps = config.ablation.sweeps
    rows: List[Dict[str, Any]] = []

    def run_setting(sweep: str, names: List[str], compute: Callable[[], List[float]]) -> None:
        try:
            values = compute()
        except TrainingDivergedError as exc:
            logger.warning("seed %d: %s/%s diverged: %s", seed, sweep, names[0], exc)
            rows.extend(
                {"sweep": sweep, "setting": setting, "seed": seed, "value": None, "status": "diverged",
                 "diagnostics": exc.diagnostics}
                for setting in names
            )
            return
        rows.extend(
            {"sweep": sweep, "setting": setting, "seed": seed, "value": float(value), "status": "ok"}
            for setting, value in zip(names, values)
        )

    warm_model = new_model(config)
    warm_result = vendor_train(
        warm_model, data.source_train, None, None,
        config.schedule.model_copy(update={"rounds": 0}), config.selection,
        np.random.default_rng(stream_seed(seed, "vendor")), seed=seed, style_task=False,
    )
    warm_start = warm_result.warm_start
    vendors: Dict[bool, Any] = {}

    def vendor(style_task: bool = True):
        if style_task not in vendors:
            try:
                vendors[style_task] = _vendor(config, data, warm_start, seed, style_task=style_task)
            except TrainingDivergedError as exc:
                vendors[style_task] = exc
        if isinstance(vendors[style_task], TrainingDivergedError):
            raise vendors[style_task]
        return vendors[style_task]

    source_test, target_test = data.source_test, data.target_test

    if "paired" in sweeps:
        metrics_seed = stream_seed(seed, "metrics")
        for name, style_task in (("with_style", True), ("no_style", False)):
            run_setting(
                "paired", [f"vendor_source/{name}", f"vendor_target/{name}"],
                lambda style_task=style_task: [
                    accuracy(vendor(style_task).model, source_test), accuracy(vendor(style_task).model, target_test)
                ],
            )
        for name, style_task in (("causal_heads", True), ("im_baseline", False)):

            def adapted_values(style_task=style_task):
                model = _client(config, data, vendor(style_task), seed, style_task=style_task)
                return [
                    accuracy(model, target_test),
                    class_token_domain_gap(
                        model, source_test.images, target_test.images, config.augment, metrics_seed
                    ).value,
                    correlation_preservation(model, source_test.images, target_test.images, metrics_seed).gap,
                ]

            run_setting(
                "paired", [f"adapted/{name}", f"domain_gap/{name}", f"correlation_gap/{name}"], adapted_values
            )

    if "epochs" in sweeps:
        for epochs in config.ablation.epoch_values:
            schedule = config.schedule.model_copy(update={"task_epochs_per_round": epochs})
            run_setting(
                "epochs", [str(epochs)],
                lambda schedule=schedule: [accuracy(_client(config, data, vendor(), seed, schedule=schedule), target_test)],
            )

    if "lambda" in sweeps:
        for lam in config.ablation.lambda_values:
            swept = config.model_copy(update={"selection": config.selection.model_copy(update={"lam": lam})})

            def lambda_value(swept=swept):
                lam_vendor = _vendor(swept, data, warm_start, seed)
                return [accuracy(_client(swept, data, lam_vendor, seed), target_test)]

            run_setting("lambda", [str(lam)], lambda_value)

    if "augs" in sweeps:
        for count in config.ablation.aug_counts:
            augment = config.augment.model_copy(update={"families": config.augment.families[:count]})

            def augs_value(augment=augment):
                style_source = build_style_dataset(data.source_train, augment, augment.seed)
                style_target = build_style_dataset(DomainDataset(images=data.target_train.images), augment, augment.seed)
                aug_vendor = _vendor(config, data, warm_start, seed, augment=augment, style=style_source)
                return [accuracy(_client(config, data, aug_vendor, seed, style=style_target), target_test)]

            run_setting("augs", [str(count)], augs_value)

    if "losses" in sweeps:
        for setting in config.ablation.loss_settings:
            terms = setting.split("+")
            schedule = config.schedule.model_copy(
                update={"use_entropy": "ent" in terms, "use_diversity": "div" in terms, "use_sspl": "sspl" in terms}
            )
            run_setting(
                "losses", [setting],
                lambda schedule=schedule: [accuracy(_client(config, data, vendor(), seed, schedule=schedule), target_test)],
            )

    diverged = sum(row["status"] == "diverged" for row in rows)
    logger.info("seed %d: %d ablation values, %d diverged", seed, len(rows), diverged)
    return rows
