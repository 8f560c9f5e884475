import numpy as np
import pytest

from penletters.autodiff import precision, set_precision
from penletters.dataset import synth_generate
from penletters.preprocessing import ProcessedSample


@pytest.fixture(autouse=True)
def _reset_precision():
    set_precision("f32")
    yield
    set_precision("f32")


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture(scope="session")
def tiny_raw():
    """One writer, one recording per letter."""
    samples, manifest = synth_generate(2, 1, length=120, seed=3)
    return samples, manifest


def random_processed(n, channels=3, length=32, seed=0, classes=52):
    rng = np.random.default_rng(seed)
    return [ProcessedSample(rng.normal(size=(channels, length)), int(i % classes), f"w{i % 3}") for i in range(n)]
