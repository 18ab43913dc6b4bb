import functools
import time

import pytest

from mixnpe.estimator import MNPE
from mixnpe.presets import preset
from mixnpe.simulators import GaussianToy, simulate_dataset

# Wall time of each cached toy fit, keyed like trained_toy's arguments.
FIT_SECONDS = {}


@functools.lru_cache(maxsize=None)
def trained_toy(budget, seed):
    """Toy estimator with the default architecture, cached across test modules."""
    start = time.perf_counter()
    model = GaussianToy()
    data = simulate_dataset(model, budget, seed)
    est = MNPE(space=model.space, **preset("gaussian_toy", seed=seed)).fit_dataset(data)
    FIT_SECONDS[budget, seed] = time.perf_counter() - start
    return est


@pytest.fixture(scope="session")
def toy_estimator():
    return trained_toy(10_000, 0)
