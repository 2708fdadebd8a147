import pytest

import fedlora
from fedlora.data import generate
from fedlora.fedproto import build_base_model

from .utils import tiny_config


@pytest.fixture(autouse=True, scope="session")
def disable_tqdm_output():
    fedlora.disable_progress_bar()


@pytest.fixture(autouse=True)
def propagate_library_logs():
    # caplog listens on the root logger
    fedlora.logging.enable_propagation()
    yield
    fedlora.logging.disable_propagation()


@pytest.fixture(autouse=True)
def unset_seed_override(monkeypatch):
    monkeypatch.delenv("FEDLORA_SEED", raising=False)
    monkeypatch.setattr("fedlora.config.FEDLORA_SEED", None)


@pytest.fixture(scope="session")
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def shards(config):
    return generate(config.task)


@pytest.fixture(scope="session")
def model(config):
    return build_base_model(config)
