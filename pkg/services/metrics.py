"""Evaluation: accuracy, proxy A-distance and the class-token domain-gap diagnostics."""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from errors import ContractError, EmptyDatasetError
from models import ADistanceResult, AugmentParams, CorrelationReport, EvalReport
from services.domains import DomainDataset
from services.stylization import augment, reference_bank
from services.vit import ViTModel

logger = logging.getLogger(__name__)

MIN_DOMAIN_SAMPLES = 20


def accuracy(model: ViTModel, dataset: DomainDataset, batch_size: int = 128) -> float:
    if len(dataset) == 0:
        raise EmptyDatasetError("accuracy needs at least one labelled sample")
    logits = model.infer(dataset.images, batch_size)["goal_logits"]
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def per_class_accuracy(model: ViTModel, dataset: DomainDataset, batch_size: int = 128) -> Dict[int, float]:
    if len(dataset) == 0:
        raise EmptyDatasetError("accuracy needs at least one labelled sample")
    predictions = np.argmax(model.infer(dataset.images, batch_size)["goal_logits"], axis=1)
    return {
        int(k): float(np.mean(predictions[dataset.labels == k] == k))
        for k in np.unique(dataset.labels)
    }


def a_distance_from_error(error: float) -> float:
    return float(np.clip(2.0 * (1.0 - 2.0 * error), 0.0, 2.0))


def a_distance(features_a: np.ndarray, features_b: np.ndarray, seed: int = 0) -> ADistanceResult:
    """
    Proxy A-distance 2(1 - 2e), e being the held-out error of a linear
    logistic domain classifier trained on a seeded 50/50 split.
    """
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    n_a, n_b = len(features_a), len(features_b)
    if min(n_a, n_b) < MIN_DOMAIN_SAMPLES:
        raise ContractError(f"a_distance needs at least {MIN_DOMAIN_SAMPLES} samples per domain, got {n_a} and {n_b}")
    features = np.concatenate([features_a, features_b])
    domains = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    if np.all(np.ptp(features, axis=0) == 0):
        logger.warning("a_distance on single-point features; reporting 0")
        return ADistanceResult(value=0.0, error=0.5, n_a=n_a, n_b=n_b, degenerate=True)

    train, test = [], []
    for domain in (0, 1):
        # keyed on the domain size only, so swapping the arguments keeps the split
        members = np.flatnonzero(domains == domain)
        rows = members[np.random.default_rng([seed, len(members)]).permutation(len(members))]
        half = len(rows) // 2
        train.append(rows[:half])
        test.append(rows[half:])
    train, test = np.concatenate(train), np.concatenate(test)

    mean = features[train].mean(axis=0)
    std = features[train].std(axis=0)
    std[std == 0] = 1.0
    scaled = (features - mean) / std
    classifier = LogisticRegression(max_iter=1000, random_state=seed)
    classifier.fit(scaled[train], domains[train])
    error = float(1.0 - classifier.score(scaled[test], domains[test]))
    return ADistanceResult(value=a_distance_from_error(error), error=error, n_a=n_a, n_b=n_b)


def mean_class_token(
    model: ViTModel,
    image: np.ndarray,
    params: Optional[AugmentParams] = None,
    families: Optional[Sequence[int]] = None,
    index: int = 0,
    bank: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    """Average z_c over the clean image and each of its augmentations."""
    families = [] if params is None else list(params.families if families is None else families)
    views = [np.asarray(image, dtype=np.float32)]
    views += [augment(image, family, params, index=index, bank=bank) for family in families]
    return model.infer(np.stack(views))["z_c"].astype(np.float64).mean(axis=0)


def mean_class_tokens(
    model: ViTModel, images: np.ndarray, params: Optional[AugmentParams] = None
) -> np.ndarray:
    bank = None
    if params is not None:
        bank = reference_bank(params, images.shape[-1], images.shape[1])
    return np.stack(
        [mean_class_token(model, image, params, index=i, bank=bank) for i, image in enumerate(images)]
    )


def class_token_domain_gap(
    model: ViTModel,
    source_images: np.ndarray,
    target_images: np.ndarray,
    params: Optional[AugmentParams] = None,
    seed: int = 0,
) -> ADistanceResult:
    """A-distance between source and target mean-class-token features."""
    return a_distance(
        mean_class_tokens(model, source_images, params),
        mean_class_tokens(model, target_images, params),
        seed,
    )


def correlation_preservation(
    model: ViTModel, source_images: np.ndarray, target_images: np.ndarray, seed: int = 0
) -> CorrelationReport:
    """
    Distinguishability of z_c from z_n within each domain, and how much it
    moved between source and target. Smaller gap means better preserved.
    """
    source = model.infer(source_images)
    target = model.infer(target_images)
    d_source = a_distance(source["z_c"], source["z_n"], seed)
    d_target = a_distance(target["z_c"], target["z_n"], seed)
    return CorrelationReport(source=d_source, target=d_target, gap=abs(d_source.value - d_target.value))


def evaluate_model(
    model: ViTModel, stage: str, source_test: Optional[DomainDataset], target_test: Optional[DomainDataset]
) -> EvalReport:
    return EvalReport(
        stage=stage,
        source_acc=None if source_test is None else accuracy(model, source_test),
        target_acc=None if target_test is None else accuracy(model, target_test),
        target_per_class=None if target_test is None else per_class_accuracy(model, target_test),
    )
