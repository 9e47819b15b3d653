import numpy as np
import pytest
import torch

from portionnet.config import DataConfig, ModelConfig, RunConfig
from portionnet.data import generate_synthetic_dataset


@pytest.fixture
def tiny_data_config():
    return DataConfig(class_count=4, samples_per_class=5, n_points=128, resolution=32)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        class_count=4,
        n_points=128,
        backbone_dims=(24, 16),
        feature_dim=16,
        proj_hidden=32,
        pointnet_widths=(8, 16),
        pool_resolutions=(16, 32, 64),
        bbox_embed_dim=8,
        adapter_hidden=32,
        attention_heads=4,
        fusion_hidden=32,
        cls_hidden=(32, 16),
        energy_hidden=16,
    )


@pytest.fixture
def tiny_run_config(tiny_data_config, tiny_model_config):
    return RunConfig(
        data=tiny_data_config,
        model=tiny_model_config,
        training={"epochs": 2, "micro_batch": 4, "accumulation_steps": 2},
    )


@pytest.fixture
def tiny_splits(tiny_data_config):
    return generate_synthetic_dataset(tiny_data_config)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
