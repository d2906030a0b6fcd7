import warnings

import numpy as np
import pytest

from lgda.dataset import SHIFT_PRESETS, SynthConfig, generate_synthetic
from lgda.segmodel import pretrained_reference_backbone
from lgda.trainer import TrainConfig, pretrain_source


@pytest.fixture(scope="session")
def tiny_data():
    """32 px scenes: 12 source, 8 target (strong shift)."""
    return generate_synthetic(SynthConfig(image_size=32, n_source=12, n_target=8,
                                          shift=SHIFT_PRESETS["strong"], seed=3))


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    source, _ = tiny_data
    model = pretrained_reference_backbone(feature_channels=8, dropout_rate=0.3, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, _ = pretrain_source(model, source, TrainConfig(epochs_source=3, batch_size=4, seed=0))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
