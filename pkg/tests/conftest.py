import numpy as np
import pytest

from neuralizer.datagen import PhantomConfig, SamplerConfig, make_pool
from neuralizer.model import BaselineConfig, ModelConfig
from neuralizer.train import TrainConfig


@pytest.fixture(scope="session")
def small_pool():
    return make_pool(14, PhantomConfig(image_size=32), base_seed=4200)


@pytest.fixture(scope="session")
def tiny_pool():
    return make_pool(10, PhantomConfig(image_size=16), base_seed=880)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def smoke_train_config(**overrides) -> TrainConfig:
    kw = dict(
        steps_max=24,
        batch_size=2,
        val_interval=8,
        pool_size=12,
        val_episodes=4,
        seed=5,
        model=ModelConfig(channels=4, image_size=16),
        baseline=BaselineConfig(width=4, image_size=16),
        phantom=PhantomConfig(image_size=16),
        sampler=SamplerConfig(context_size_max=3),
    )
    kw.update(overrides)
    return TrainConfig(**kw)
