import numpy as np
import pytest
import torch

from taskcon.config import ModelConfig, TrainConfig, AugmentConfig
from taskcon.data import SyntheticSpec, synthesize_dataset


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_batch():
    gen = torch.Generator().manual_seed(0)
    return torch.randn(4, 3, 32, 32, 8, generator=gen)


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(n_samples=48, prevalence_grade=0.5, prevalence_invasion=0.25,
                         signal_common=1.5, signal_grade=1.0, signal_invasion=1.0, seed=3)
    return synthesize_dataset(spec)


@pytest.fixture
def quick_train_config():
    return TrainConfig(model=ModelConfig.tiny(warmup_epochs=1), epochs=2, batch_size=16,
                       augment=AugmentConfig(enabled=True), eval_every=1)
