import numpy as np
import pytest

from sflow import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _finite_checks_on():
    with ad.finite_checks(True):
        yield


@pytest.fixture(scope="session")
def toy_corpus():
    from sflow.data import generate_synthetic_corpus
    return generate_synthetic_corpus(7, 500, 200)


@pytest.fixture(scope="session")
def heldout_corpus():
    from sflow.data import generate_synthetic_corpus
    return generate_synthetic_corpus(99, 100, 200)


@pytest.fixture(scope="session")
def trained_scorer(toy_corpus):
    from sflow.scorer import train_scorer
    return train_scorer(toy_corpus, 32, hidden=16, epochs=3, lr=1e-2, seed=5)
