import numpy as np
import pytest

from changekit.core import ImageTile, SemanticMask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mask(rng, shape=(8, 8), num_classes=4, ignore_frac=0.0):
    labels = rng.integers(0, num_classes, size=shape).astype(np.uint8)
    if ignore_frac > 0:
        ignore = rng.random(shape) < ignore_frac
        labels[ignore] = 255
    return SemanticMask(labels, num_classes)


def random_tile(rng, shape=(3, 8, 8)):
    return ImageTile(rng.random(shape).astype(np.float32))
