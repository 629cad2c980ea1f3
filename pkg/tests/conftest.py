import numpy as np
import pytest
import torch

from agm.imaging import Image, Modality


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=48, w=24, modality=Modality.VISIBLE, identity=0) -> Image:
    px = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8).astype(np.uint8)
    return Image(px, modality, identity)


def gray_image(rng, h=48, w=24, modality=Modality.GRAYSCALE, identity=0) -> Image:
    g = rng.integers(0, 256, size=(h, w, 1), dtype=np.uint8).astype(np.uint8)
    return Image(np.repeat(g, 3, axis=2), modality, identity)
