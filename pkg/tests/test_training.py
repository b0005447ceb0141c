import numpy as np
import pytest

from errors import ConfigurationError, TrainingDivergedError
from models import AugmentParams, SelectionConfig
from services import autodiff as ad
from services import training
from services.autodiff import SgdState, Tensor
from services.stylization import build_style_dataset
from services.training import (
    CentroidSet,
    PseudoLabels,
    assign_pseudo_labels,
    client_adapt,
    diversity_loss,
    entropy_loss,
    soft_centroids,
    style_step,
    task_step_source,
    vendor_train,
)
from services.vit import partition_params
from tests.conftest import tiny_schedule

MASK = np.array([[True, False], [False, True]])


@pytest.fixture
def style_data(source_data):
    return build_style_dataset(source_data, AugmentParams(), seed=0).split(0.75)


def snapshot(group):
    return {name: p.data.copy() for name, p in group.items()}


def assert_unchanged(group, before):
    for name, p in group.items():
        assert p.data.tobytes() == before[name].tobytes(), name


def test_alternating_steps_respect_the_partition(model, source_data, style_data):
    style_train, _ = style_data
    task_state, style_state = SgdState(0.05), SgdState(0.05)
    groups = partition_params(model, MASK)
    rng = np.random.default_rng(0)
    for step in range(50):
        idx = rng.choice(len(source_data), 8, replace=False)
        before = snapshot({**groups.non_causal, **groups.style})
        task_step_source(model, MASK, source_data.images[idx], source_data.labels[idx], task_state)
        assert_unchanged({**groups.non_causal, **groups.style}, before)

        idx = rng.choice(len(style_train), 8, replace=False)
        before = snapshot({**groups.causal, **groups.goal})
        style_step(model, MASK, style_train.images[idx], style_train.style_labels[idx], style_state)
        assert_unchanged({**groups.causal, **groups.goal}, before)


def test_style_step_needs_a_non_causal_head(model, style_data):
    style_train, _ = style_data
    with pytest.raises(ConfigurationError):
        style_step(model, np.zeros((2, 2), dtype=bool), style_train.images[:4], style_train.style_labels[:4], SgdState(0.1))


def test_uniform_prediction_loss_values():
    logits = Tensor(np.zeros((8, 5)))
    assert entropy_loss(logits).item() == pytest.approx(np.log(5), abs=1e-12)
    assert diversity_loss(logits).item() == pytest.approx(-np.log(5), abs=1e-12)


def test_diversity_is_kl_to_uniform_minus_log_k():
    logits = np.random.default_rng(0).normal(scale=2.0, size=(16, 6))
    mean = np.exp(logits - logits.max(axis=1, keepdims=True))
    mean = (mean / mean.sum(axis=1, keepdims=True)).mean(axis=0)
    kl = float(np.sum(mean * np.log(mean * 6)))
    assert diversity_loss(Tensor(logits)).item() == pytest.approx(kl - np.log(6), abs=1e-12)


def test_confident_predictions_have_zero_entropy():
    logits = Tensor(np.diag([200.0, 200.0, 200.0]))
    assert entropy_loss(logits).item() == pytest.approx(0.0, abs=1e-12)
    assert diversity_loss(logits).item() == pytest.approx(-np.log(3), abs=1e-12)


def test_information_maximization_gradients():
    x = np.random.default_rng(1).normal(size=(5, 4))
    for loss_fn in (entropy_loss, diversity_loss):
        tensor = Tensor(x.copy(), requires_grad=True)
        ad.backward(loss_fn(tensor))
        for idx in [(0, 0), (2, 3), (4, 1)]:
            plus, minus = x.copy(), x.copy()
            plus[idx] += 1e-6
            minus[idx] -= 1e-6
            numeric = (loss_fn(Tensor(plus)).item() - loss_fn(Tensor(minus)).item()) / 2e-6
            assert tensor.grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_soft_centroids_weight_by_probability():
    features = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    probs = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    result = soft_centroids(features, probs)
    np.testing.assert_allclose(result.centroids, [[1.0, 1 / 3], [1 / 3, 1.0]])
    assert result.fallback_classes == []


def test_empty_class_falls_back():
    features = np.array([[2.0, 0.0], [0.0, 4.0]])
    probs = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    first = soft_centroids(features, probs)
    assert first.fallback_classes == [1, 2]
    np.testing.assert_allclose(first.centroids[1], [1.0, 2.0])
    previous = np.array([[0.0, 0.0], [5.0, 5.0], [6.0, 6.0]])
    second = soft_centroids(features, probs, previous)
    np.testing.assert_allclose(second.centroids[2], [6.0, 6.0])


def test_pseudo_labels_use_cosine_distance_and_break_ties_low():
    centroids = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    features = np.array([[3.0, 0.1], [0.2, 5.0], [1.0, 1.0]])
    result = assign_pseudo_labels(features, centroids)
    np.testing.assert_array_equal(result.labels, [0, 1, 0])
    assert result.dot_product_fallbacks == []


def test_zero_norm_feature_uses_dot_product():
    result = assign_pseudo_labels(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert result.dot_product_fallbacks == [0]
    assert result.labels[1] == 0


def test_zero_norm_centroid_is_masked_not_fatal():
    features = np.array([[1.0, 0.1], [0.1, 1.0], [0.0, 0.0]])
    centroids = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    result = assign_pseudo_labels(features, centroids)
    assert result.masked_centroids == [1]
    assert result.labels[:2].tolist() == [0, 2]
    assert result.dot_product_fallbacks == [2]


def test_all_zero_centroids_fall_back_to_dot_product():
    result = assign_pseudo_labels(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 2)))
    assert result.dot_product_fallbacks == [0, 1]
    assert result.masked_centroids == [0, 1]


def test_missed_style_target_is_flagged_on_the_last_round(model, source_data, style_data, monkeypatch):
    style_train, style_holdout = style_data
    monkeypatch.setattr(training, "style_accuracy", lambda model, dataset, batch_size=128: 0.1)
    result = vendor_train(
        model, source_data, style_train, style_holdout, tiny_schedule(rounds=2),
        SelectionConfig(lam=0.3, tau=-1.0, beta_epochs=1, batch_size=8), np.random.default_rng(0),
    )
    style = [r for r in result.records if r.phase == "style"]
    assert [r.style_capped for r in style] == [True, True]
    assert style[0].warning is None
    assert style[-1].warning == training.STYLE_TARGET_MISSED


def test_reached_style_target_leaves_no_warning(model, source_data, style_data, monkeypatch):
    style_train, style_holdout = style_data
    monkeypatch.setattr(training, "style_accuracy", lambda model, dataset, batch_size=128: 1.0)
    result = vendor_train(
        model, source_data, style_train, style_holdout, tiny_schedule(rounds=2),
        SelectionConfig(lam=0.3, tau=-1.0, beta_epochs=1, batch_size=8), np.random.default_rng(0),
    )
    assert all(r.warning is None for r in result.records)
    assert not any(r.style_capped for r in result.records if r.phase == "style")


def test_vendor_training_emits_the_alternation(model, source_data, style_data):
    style_train, style_holdout = style_data
    schedule = tiny_schedule(rounds=2)
    result = vendor_train(
        model, source_data, style_train, style_holdout, schedule,
        SelectionConfig(lam=0.3, tau=-1.0, beta_epochs=1, batch_size=8), np.random.default_rng(0),
        evaluate=lambda m: 0.5,
    )
    phases = [(r.round, r.phase) for r in result.records]
    assert phases == [(0, "pretrain"), (0, "select"), (1, "task"), (1, "style"), (2, "task"), (2, "style")]
    assert result.mask.sum() == 1
    assert result.cis_report.num_selected == 1
    assert result.records[0].source_acc == 0.5
    assert result.model is model
    assert not np.array_equal(result.warm_start["goal_head.weight"], model.params["goal_head.weight"].data)


def test_vendor_baseline_skips_selection_and_style(model, source_data):
    result = vendor_train(
        model, source_data, None, None, tiny_schedule(), SelectionConfig(), np.random.default_rng(0),
        style_task=False,
    )
    assert result.mask is None and result.cis_report is None
    assert [r.phase for r in result.records] == ["pretrain", "task"]


def test_style_task_requires_style_data(model, source_data):
    with pytest.raises(ConfigurationError):
        vendor_train(model, source_data, None, None, tiny_schedule(), SelectionConfig(), np.random.default_rng(0))


def test_client_adapts_a_copy_from_images_only(model, source_data, style_data):
    style_train, style_holdout = style_data
    before = model.state_dict()
    result = client_adapt(
        model, MASK, source_data.unlabeled(), style_train, style_holdout, tiny_schedule(rounds=2),
        np.random.default_rng(0),
    )
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(value, before[name])
    task_records = [r for r in result.records if r.phase == "task"]
    assert len(task_records) == 2
    assert all(0.0 <= r.pseudo_label_agreement <= 1.0 for r in task_records)
    assert task_records[0].loss_ent is not None and task_records[0].loss_sspl is not None


def test_client_baseline_trains_without_style(model, source_data):
    schedule = tiny_schedule(use_diversity=False)
    result = client_adapt(model, None, source_data.unlabeled(), None, None, schedule, np.random.default_rng(0), style_task=False)
    assert [r.phase for r in result.records] == ["task"]
    assert result.records[0].loss_div is None


def test_client_needs_a_loss_term(model, source_data):
    schedule = tiny_schedule(use_entropy=False, use_diversity=False, use_sspl=False)
    with pytest.raises(ConfigurationError):
        client_adapt(model, None, source_data.unlabeled(), None, None, schedule, np.random.default_rng(0), style_task=False)


def test_pseudo_label_collapse_raises_with_diagnostics(model, source_data, monkeypatch):
    classes, dim = model.config.num_classes, model.config.embed_dim

    def stuck_centroids(model, target, previous=None, batch_size=128):
        probs = np.zeros((len(target), classes))
        probs[:, 0] = 1.0
        return CentroidSet(np.zeros((classes, dim))), np.ones((len(target), dim)), probs

    monkeypatch.setattr(training, "compute_centroids", stuck_centroids)
    monkeypatch.setattr(training, "assign_pseudo_labels", lambda f, c: PseudoLabels(np.ones(len(f), dtype=np.int64)))
    schedule = tiny_schedule(rounds=3, divergence_patience=2)
    with pytest.raises(TrainingDivergedError) as info:
        client_adapt(model, None, source_data.unlabeled(), None, None, schedule, np.random.default_rng(0), style_task=False)
    assert info.value.diagnostics["round"] == 2
    assert info.value.diagnostics["prediction_histogram"][0] == len(source_data)
