import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from batchspec.harness import DEFAULT_DRAFT, DEFAULT_TARGET
from batchspec.toy_lm import ModelConfig, init_model

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def target():
    return init_model(DEFAULT_TARGET)


@pytest.fixture(scope="session")
def draft():
    return init_model(DEFAULT_DRAFT)


@pytest.fixture(scope="session")
def small():
    return init_model(ModelConfig(num_layers=2, num_heads=2, head_dim=4, vocab_size=16, seed=3))


def random_prompts(n, lo=4, hi=20, vocab=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(2, vocab, size=int(rng.integers(lo, hi + 1))).tolist() for _ in range(n)]


@pytest.fixture
def prompts():
    return random_prompts(24, seed=11)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[criterion])
