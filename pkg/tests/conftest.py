import numpy as np
import pytest

from areaser.gradcheck import tiny_model_config
from areaser.synth import make_synthetic_store

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line[1])


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[_ACCEPTANCE]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_store_dir(tmp_path_factory):
    """20-utterance synthetic store, shared read-only."""
    root = tmp_path_factory.mktemp("small_store")
    make_synthetic_store(root, per_class=5, seed=7)
    return root


@pytest.fixture
def tiny_config():
    return tiny_model_config()
