import numpy as np
import pytest

from scripts.data_loader import LabeledImageSet
from scripts.nn_models import DaeModel, MnistClassifier
from scripts.training import ReconStats


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def digit_images(rng):
    """Six random 28x28 single-channel images with labels 0..5."""
    images = rng.uniform(0.0, 1.0, size=(6, 1, 28, 28)).astype(np.float32)
    return LabeledImageSet(images, np.arange(6), "digits")


@pytest.fixture
def classifier():
    return MnistClassifier(seed=0).eval()


@pytest.fixture
def small_dae():
    return DaeModel(channels=1, depth=2, width=4, seed=0).eval()


@pytest.fixture
def stats():
    return ReconStats(mu=0.05, sigma=0.01)
