"""
Vendor-side alternating training and client-side source-free adaptation.

Vendor: warm-start the goal task, pick non-causal heads, then alternate
goal-task epochs (causal backbone + f_g) with style epochs (non-causal heads +
f_n) until the style classifier clears its accuracy target.

Client: per round, refresh class centroids and pseudo-labels on the target,
train the causal backbone + f_g with entropy, diversity and pseudo-label
losses, then run the same style phase on augmented target images. The client
only ever receives an `UnlabeledDataset`.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from errors import ConfigurationError, TrainingDivergedError
from models import CisReport, MetricsRecord, SelectionConfig, TrainSchedule
from services import autodiff as ad
from services.autodiff import SgdState, Tensor
from services.domains import DomainDataset, StyleDataset, UnlabeledDataset
from services.head_selection import select_heads
from services.vit import ViTModel, partition_params

logger = logging.getLogger(__name__)

MIN_CENTROID_MASS = 1e-8

Evaluator = Callable[[ViTModel], float]


@dataclass
class CentroidSet:
    centroids: np.ndarray
    fallback_classes: List[int] = field(default_factory=list)


@dataclass
class PseudoLabels:
    labels: np.ndarray
    dot_product_fallbacks: List[int] = field(default_factory=list)
    masked_centroids: List[int] = field(default_factory=list)


@dataclass
class StylePhaseResult:
    loss: float
    accuracy: float
    epochs: int
    capped: bool


@dataclass
class VendorResult:
    model: ViTModel
    mask: Optional[np.ndarray]
    cis_report: Optional[CisReport]
    warm_start: Dict[str, np.ndarray]
    records: List[MetricsRecord]


@dataclass
class ClientResult:
    model: ViTModel
    records: List[MetricsRecord]


def _sgd(schedule: TrainSchedule, lr: float) -> SgdState:
    return SgdState(learning_rate=lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay)


def style_step(
    model: ViTModel,
    mask: np.ndarray,
    images: np.ndarray,
    style_labels: np.ndarray,
    state: SgdState,
    smoothing: float = 0.0,
) -> float:
    """One SGD step of the style loss over the non-causal heads and f_n only."""
    groups = partition_params(model, mask)
    if not groups.non_causal:
        raise ConfigurationError("style_step needs at least one non-causal head in the mask")
    params = groups.style_params()
    with model.trainable(params):
        model.zero_grad()
        loss = ad.cross_entropy(model.forward(images).style_logits, style_labels, smoothing)
        ad.backward(loss)
        ad.sgd_step(params, state)
    return loss.item()


def task_step_source(
    model: ViTModel,
    mask: Optional[np.ndarray],
    images: np.ndarray,
    labels: np.ndarray,
    state: SgdState,
    smoothing: float = 0.0,
    lr_scale: float = 1.0,
) -> float:
    """One SGD step of the goal loss over the causal backbone and f_g only."""
    params = partition_params(model, mask).task_params()
    with model.trainable(params):
        model.zero_grad()
        loss = ad.cross_entropy(model.forward(images).goal_logits, labels, smoothing)
        ad.backward(loss)
        ad.sgd_step(params, state, lr_scale)
    return loss.item()


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the softmaxed logits."""
    batch = logits.shape[0]
    return ad.mul(ad.sum(ad.xlogx(ad.softmax_rows(logits))), -1.0 / batch)


def diversity_loss(logits: Tensor) -> Tensor:
    """sum_k p_k log p_k of the batch-mean prediction, i.e. KL(p || uniform) - log K."""
    return ad.sum(ad.xlogx(ad.mean(ad.softmax_rows(logits), axis=0)))


def soft_centroids(
    features: np.ndarray, probs: np.ndarray, previous: Optional[np.ndarray] = None
) -> CentroidSet:
    mass = probs.sum(axis=0)
    weighted = probs.T @ features
    fallback = previous if previous is not None else np.broadcast_to(features.mean(axis=0), weighted.shape)
    empty = mass < MIN_CENTROID_MASS
    centroids = np.where(empty[:, None], fallback, weighted / np.where(empty, 1.0, mass)[:, None])
    flagged = [int(k) for k in np.flatnonzero(empty)]
    if flagged:
        logger.warning("centroid fallback for classes %s (soft mass below %.0e)", flagged, MIN_CENTROID_MASS)
    return CentroidSet(centroids=centroids, fallback_classes=flagged)


def compute_centroids(
    model: ViTModel,
    target: UnlabeledDataset,
    previous: Optional[CentroidSet] = None,
    batch_size: int = 128,
) -> Tuple[CentroidSet, np.ndarray, np.ndarray]:
    """Soft-assignment class centroids in class-token space; also returns features and probabilities."""
    out = model.infer(target.images, batch_size)
    features = out["z_c"].astype(np.float64)
    probs = ad.softmax_rows(Tensor(out["goal_logits"].astype(np.float64))).data
    centroids = soft_centroids(features, probs, None if previous is None else previous.centroids)
    return centroids, features, probs


def assign_pseudo_labels(features: np.ndarray, centroids: np.ndarray) -> PseudoLabels:
    """
    Nearest centroid under cosine distance; ties go to the smallest class index.
    Zero-norm centroids never win a cosine assignment. Only zero-norm features,
    or a set with no usable centroid at all, fall back to the raw dot product.
    """
    features = np.asarray(features, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    feature_norms = np.linalg.norm(features, axis=1)
    live = np.linalg.norm(centroids, axis=1) > 0
    masked = [int(k) for k in np.flatnonzero(~live)]
    if masked:
        logger.warning("zero-norm centroids %s excluded from cosine assignment", masked)
    labels = np.empty(len(features), dtype=np.int64)
    degenerate = feature_norms == 0
    if not live.any():
        degenerate[:] = True
    usable = ~degenerate
    if usable.any():
        distances = np.full((int(usable.sum()), len(centroids)), np.inf)
        distances[:, live] = cdist(features[usable], centroids[live], metric="cosine")
        labels[usable] = np.argmin(distances, axis=1)
    if degenerate.any():
        labels[degenerate] = np.argmax(features[degenerate] @ centroids.T, axis=1)
        logger.warning("%d samples labelled by raw dot product (zero norm)", int(degenerate.sum()))
    return PseudoLabels(
        labels=labels,
        dot_product_fallbacks=[int(i) for i in np.flatnonzero(degenerate)],
        masked_centroids=masked,
    )


def style_accuracy(model: ViTModel, dataset: StyleDataset, batch_size: int = 128) -> float:
    logits = model.infer(dataset.images, batch_size)["style_logits"]
    return float(np.mean(np.argmax(logits, axis=1) == dataset.style_labels))


def run_style_phase(
    model: ViTModel,
    mask: np.ndarray,
    style_train: StyleDataset,
    style_holdout: StyleDataset,
    schedule: TrainSchedule,
    state: SgdState,
    rng: np.random.Generator,
) -> StylePhaseResult:
    """Style epochs until the holdout style accuracy reaches the target, or the epoch cap."""
    losses: List[float] = []
    accuracy = 0.0
    for epoch in range(1, schedule.style_max_epochs_per_round + 1):
        for idx in style_train.batches(schedule.batch_size, rng):
            losses.append(
                style_step(
                    model, mask, style_train.images[idx], style_train.style_labels[idx], state,
                    schedule.label_smoothing,
                )
            )
        accuracy = style_accuracy(model, style_holdout)
        if accuracy >= schedule.style_accuracy_target:
            return StylePhaseResult(float(np.mean(losses)), accuracy, epoch, capped=False)
    logger.warning(
        "style accuracy %.3f below target %.2f after %d epochs",
        accuracy, schedule.style_accuracy_target, schedule.style_max_epochs_per_round,
    )
    return StylePhaseResult(float(np.mean(losses)), accuracy, schedule.style_max_epochs_per_round, capped=True)


STYLE_TARGET_MISSED = "style accuracy target missed in every round"


def _flag_style_target_missed(records: List[MetricsRecord], stage: str) -> None:
    style = [r for r in records if r.phase == "style"]
    if style and all(r.style_capped for r in style):
        style[-1].warning = STYLE_TARGET_MISSED
        logger.warning("%s: %s (%d rounds)", stage, STYLE_TARGET_MISSED, len(style))


def _source_epoch(
    model: ViTModel,
    mask: Optional[np.ndarray],
    data: DomainDataset,
    schedule: TrainSchedule,
    state: SgdState,
    rng: np.random.Generator,
    lr_scale: float = 1.0,
) -> float:
    losses = [
        task_step_source(model, mask, data.images[idx], data.labels[idx], state, schedule.label_smoothing, lr_scale)
        for idx in data.batches(schedule.batch_size, rng)
    ]
    return float(np.mean(losses))


def vendor_train(
    model: ViTModel,
    source: DomainDataset,
    style_train: Optional[StyleDataset],
    style_holdout: Optional[StyleDataset],
    schedule: TrainSchedule,
    selection: SelectionConfig,
    rng: np.random.Generator,
    seed: int = 0,
    style_task: bool = True,
    evaluate: Optional[Evaluator] = None,
    select_rng: Optional[np.random.Generator] = None,
) -> VendorResult:
    """
    Trains `model` in place: warm start, head selection, then `rounds` of
    alternating goal/style training. With `style_task=False` the rounds train
    the goal task alone over the whole backbone. `select_rng` drives head
    selection on its own stream so it can be replayed from the warm start.
    """
    records: List[MetricsRecord] = []
    task_state = _sgd(schedule, schedule.vendor_lr)
    for epoch in range(schedule.pretrain_epochs):
        scale = schedule.warmup_factor if epoch < schedule.warmup_epochs else 1.0
        loss = _source_epoch(model, None, source, schedule, task_state, rng, scale)
        records.append(
            MetricsRecord(stage="vendor", round=0, phase="pretrain", seed=seed, loss_cls=loss,
                          source_acc=evaluate(model) if evaluate else None)
        )
        logger.info("warm start epoch %d/%d: loss %.4f", epoch + 1, schedule.pretrain_epochs, loss)
    warm_start = model.state_dict()

    mask, report = None, None
    if style_task:
        if style_train is None or style_holdout is None:
            raise ConfigurationError("the style task needs style training and holdout data")
        report = select_heads(model, source, selection, select_rng if select_rng is not None else rng)
        mask = np.asarray(report.mask, dtype=bool)
        records.append(MetricsRecord(stage="vendor", round=0, phase="select", seed=seed))
    style_state = _sgd(schedule, schedule.style_lr)

    for rnd in range(1, schedule.rounds + 1):
        losses = [
            _source_epoch(model, mask, source, schedule, task_state, rng)
            for _ in range(schedule.task_epochs_per_round)
        ]
        records.append(
            MetricsRecord(stage="vendor", round=rnd, phase="task", seed=seed, loss_cls=float(np.mean(losses)),
                          source_acc=evaluate(model) if evaluate else None)
        )
        if style_task:
            phase = run_style_phase(model, mask, style_train, style_holdout, schedule, style_state, rng)
            records.append(
                MetricsRecord(stage="vendor", round=rnd, phase="style", seed=seed, loss_style=phase.loss,
                              style_acc=phase.accuracy, style_capped=phase.capped)
            )
        logger.info("vendor round %d/%d done", rnd, schedule.rounds)
    _flag_style_target_missed(records, "vendor")
    return VendorResult(model=model, mask=mask, cis_report=report, warm_start=warm_start, records=records)


def _client_loss(
    logits: Tensor, pseudo: np.ndarray, schedule: TrainSchedule
) -> Tuple[Tensor, Dict[str, float]]:
    terms: Dict[str, Tensor] = {}
    if schedule.use_entropy:
        terms["loss_ent"] = entropy_loss(logits)
    if schedule.use_diversity:
        terms["loss_div"] = diversity_loss(logits)
    if schedule.use_sspl:
        terms["loss_sspl"] = ad.mul(ad.cross_entropy(logits, pseudo), schedule.sspl_weight)
    if not terms:
        raise ConfigurationError("client adaptation needs at least one loss term enabled")
    total = None
    for value in terms.values():
        total = value if total is None else total + value
    return total, {name: value.item() for name, value in terms.items()}


def client_adapt(
    model: ViTModel,
    mask: Optional[np.ndarray],
    target: UnlabeledDataset,
    style_train: Optional[StyleDataset],
    style_holdout: Optional[StyleDataset],
    schedule: TrainSchedule,
    rng: np.random.Generator,
    seed: int = 0,
    style_task: bool = True,
    evaluate: Optional[Evaluator] = None,
) -> ClientResult:
    """
    Adapts a copy of the vendor model to unlabeled target images. `evaluate`
    is an optional eval-only hook for telemetry; the loop never sees labels.
    """
    model = model.clone()
    if style_task and (mask is None or style_train is None or style_holdout is None):
        raise ConfigurationError("the client style phase needs the vendor head mask and target style data")
    num_classes = model.config.num_classes
    task_state = _sgd(schedule, schedule.client_lr)
    style_state = _sgd(schedule, schedule.style_lr)
    params = partition_params(model, mask).task_params()
    records: List[MetricsRecord] = []
    centroids: Optional[CentroidSet] = None
    low_agreement = 0

    for rnd in range(1, schedule.rounds + 1):
        centroids, features, probs = compute_centroids(model, target, centroids)
        pseudo = assign_pseudo_labels(features, centroids.centroids)
        agreement = float(np.mean(np.argmax(probs, axis=1) == pseudo.labels))
        low_agreement = low_agreement + 1 if agreement < 1.0 / num_classes else 0
        if low_agreement >= schedule.divergence_patience:
            raise TrainingDivergedError(
                "pseudo-label agreement stayed below chance",
                {"round": rnd, "agreement": round(agreement, 4), "rounds_below": low_agreement,
                 "prediction_histogram": np.bincount(np.argmax(probs, axis=1), minlength=num_classes).tolist()},
            )

        sums: Dict[str, List[float]] = {}
        for _ in range(schedule.task_epochs_per_round):
            for idx in target.batches(schedule.batch_size, rng):
                with model.trainable(params):
                    model.zero_grad()
                    logits = model.forward(target.images[idx]).goal_logits
                    loss, parts = _client_loss(logits, pseudo.labels[idx], schedule)
                    ad.backward(loss)
                    ad.sgd_step(params, task_state)
                for name, value in parts.items():
                    sums.setdefault(name, []).append(value)
        records.append(
            MetricsRecord(
                stage="client", round=rnd, phase="task", seed=seed,
                pseudo_label_agreement=agreement,
                centroid_fallbacks=len(centroids.fallback_classes),
                target_acc=evaluate(model) if evaluate else None,
                **{name: float(np.mean(values)) for name, values in sums.items()},
            )
        )
        if style_task:
            phase = run_style_phase(model, mask, style_train, style_holdout, schedule, style_state, rng)
            records.append(
                MetricsRecord(stage="client", round=rnd, phase="style", seed=seed, loss_style=phase.loss,
                              style_acc=phase.accuracy, style_capped=phase.capped)
            )
        logger.info("client round %d/%d: pseudo-label agreement %.3f", rnd, schedule.rounds, agreement)
    _flag_style_target_missed(records, "client")
    return ClientResult(model=model, records=records)
