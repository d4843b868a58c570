import numpy as np
import pytest
from hypothesis import settings

from condsub.domain import Dataset

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def uniform_dataset(n, d=2, side=1000, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.integers(1, side + 1, size=(int(n * 1.3) + 10, d))
    ds = Dataset(pts, dedupe=True)
    return Dataset(ds.coords[:n])


@pytest.fixture
def small_grid():
    """All 64 points of [1, 8]^2."""
    return Dataset([[x, y] for x in range(1, 9) for y in range(1, 9)], side=8)
