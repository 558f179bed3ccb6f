import numpy as np
import pytest

from tilessl.tile_corpus import TileRecord


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tile(seed: int, size: int = 275, slide: str = "s0", label: int = 0) -> TileRecord:
    """Smooth-ish random tile in [0, 1], enough structure for crop tests."""
    r = np.random.default_rng(seed)
    base = r.random((size // 25 + 1, size // 25 + 1, 3))
    pix = np.kron(base, np.ones((25, 25, 1)))[:size, :size] * 0.8 + 0.2 * r.random((size, size, 3))
    return TileRecord(pix.astype(np.float32), slide, 0.25, size, (seed * 7, seed * 3), seed, label)


@pytest.fixture
def tiles():
    return [random_tile(i, slide=f"s{i % 3}") for i in range(6)]
