import numpy as np
import pytest

from ultraseg.data import ImageSample, Source, make_bus_split
from ultraseg.synthetic import make_synthetic_corpus


def stub_sample(sample_id: str, size: int = 4, with_mask: bool = False) -> ImageSample:
    rng = np.random.default_rng(abs(hash(sample_id)) % 2**32)
    pixels = rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32)
    mask = None
    if with_mask:
        mask = (rng.uniform(size=(size, size)) > 0.5).astype(np.uint8)
    return ImageSample(id=sample_id, source=Source.BUS, pixels=pixels, mask=mask)


def stub_ids(n: int, prefix: str = "img") -> list[str]:
    return [f"{prefix}-{i:05d}" for i in range(n)]


@pytest.fixture(scope="session")
def tiny_corpus():
    return make_synthetic_corpus(n=24, size=16, seed=7)


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    return make_bus_split(tiny_corpus, seed=7, counts=(16, 4, 4), name="tiny")


@pytest.fixture(scope="session")
def tiny_pool(tiny_corpus):
    return {s.id: s for s in tiny_corpus}
