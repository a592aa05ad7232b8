"""Shared fixtures: tiny configurations that keep every model test fast."""

import numpy as np
import pytest

from motiontools.dense_motion import DenseMotionConfig
from motiontools.encoder import EncoderConfig
from motiontools.generator import GeneratorConfig
from motiontools.losses import PerceptualConfig
from motiontools.model import ModelConfig, init_model
from motiontools.motion_transformer import TransformerConfig
from motiontools.trainer import TrainConfig

TINY_SIZE = 32
TINY_PARTS = 3


def tiny_model_config(**overrides):
    """A 32x32, 3-part model small enough for gradient checks."""
    transformer = overrides.pop("transformer", None) or TransformerConfig(
        layers=2, heads=2, dim=8, num_motion_tokens=TINY_PARTS
    )
    values = dict(
        image_size=TINY_SIZE,
        encoder=EncoderConfig(channels=4, residual_blocks=1, patch_size=4, dim=transformer.dim),
        transformer=transformer,
        dense_motion=DenseMotionConfig(channels=(4, 4, 4), scale_factor=4, background_channels=(4, 4, 4)),
        generator=GeneratorConfig(base_channels=4, stages=2, residual_blocks=1),
        perceptual=PerceptualConfig(scales=(1, 2), channels=(4, 4, 4, 4)),
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=0)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(epochs=2, batch_size=2, pairs_per_epoch=2, seed=0, prefetch=1)


@pytest.fixture
def image(rng):
    return rng.uniform(0.0, 1.0, size=(3, TINY_SIZE, TINY_SIZE))


@pytest.fixture
def make_config():
    return tiny_model_config
