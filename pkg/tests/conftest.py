import numpy as np
import pytest

from models import (
    AblationConfig,
    AugmentParams,
    CausalGraphParams,
    DataConfig,
    RunConfig,
    SelectionConfig,
    TrainSchedule,
    ViTConfig,
)
from services.domains import sample_domain
from services.vit import ViTModel


def tiny_vit(**overrides) -> ViTConfig:
    values = dict(
        image_size=16, patch_size=8, embed_dim=8, num_blocks=2, heads_per_block=2, num_styles=6, style_hidden=8, dtype="float64"
    )
    values.update(overrides)
    return ViTConfig(**values)


def tiny_schedule(**overrides) -> TrainSchedule:
    values = dict(
        rounds=1,
        pretrain_epochs=1,
        warmup_epochs=1,
        task_epochs_per_round=1,
        style_max_epochs_per_round=1,
        batch_size=16,
    )
    values.update(overrides)
    return TrainSchedule(**values)


def tiny_run_config(**overrides) -> RunConfig:
    values = dict(
        seed=0,
        vit=tiny_vit(dtype="float32"),
        source=CausalGraphParams(image_size=16),
        target=CausalGraphParams(image_size=16, pairing_shift=1),
        data=DataConfig(source_size=60, target_size=60, train_fraction=0.5),
        augment=AugmentParams(),
        selection=SelectionConfig(tau=-1.0, beta_epochs=1, batch_size=16),
        schedule=tiny_schedule(),
        ablation=AblationConfig(seeds=[0], sweeps=["epochs"], epoch_values=[1, 2]),
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def vit_config() -> ViTConfig:
    return tiny_vit()


@pytest.fixture
def model(vit_config) -> ViTModel:
    return ViTModel(vit_config, seed=3)


@pytest.fixture
def source_data():
    return sample_domain(CausalGraphParams(image_size=16, seed=1), 24)


@pytest.fixture
def images(source_data) -> np.ndarray:
    return source_data.images[:4]


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run_config()
