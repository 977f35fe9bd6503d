import pytest

from med2vec.corpus import SynthConfig, generate_synthetic
from med2vec.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def default_synth():
    """Default synthetic corpus shared across trainer, evaluation and acceptance tests."""
    return generate_synthetic(SynthConfig())


@pytest.fixture(scope="session")
def default_trained(default_synth):
    """Model trained 10 epochs on the default synthetic corpus (grouped targets)."""
    corpus, grouper, _ = default_synth
    params, log = train(corpus, grouper, TrainConfig())
    return params, log
