import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")


@pytest.fixture(scope="session")
def corpus64():
    from memaudit import volumes as vol
    return vol.generate_phantoms(7, 64, (16, 16, 16), prefix="tr")


@pytest.fixture(scope="session")
def heldout():
    from memaudit import volumes as vol
    return vol.generate_phantoms(8, 32, (16, 16, 16), prefix="ho")


@pytest.fixture(scope="session")
def trained_ae(corpus64):
    from memaudit import autoencoder as ae
    cfg = ae.AutoencoderConfig(epochs=60, seed=0)
    params, curve = ae.train_autoencoder(cfg, corpus64)
    return params, curve


@pytest.fixture(scope="session")
def corpus_latents(trained_ae, corpus64):
    from memaudit import autoencoder as ae, volumes as vol
    return ae.encode_batched(trained_ae[0], vol.stack(corpus64))


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
