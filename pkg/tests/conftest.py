from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from recallseg.core import Image, LabelMap, Sample

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_sample(rng: np.random.Generator, h: int = 6, w: int = 6, classes=(0, 1, 2), name: str = "") -> Sample:
    img = Image(rng.random((h, w, 3)))
    lab = LabelMap(rng.choice(np.asarray(classes), size=(h, w)))
    return Sample(img, lab, name)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
