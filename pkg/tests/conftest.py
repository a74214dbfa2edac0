import numpy as np
import pytest

from mpep.config import main_effects_config
from mpep.fitting import fit_model
from mpep.likelihood import Model
from mpep.sampler import SamplerConfig
from mpep.synthetic import generate_synthetic, reference_truth

DESK_SHAPE = (2, 3, 3, 2)
EVENTS = ("deaths", "hospitalisations")


@pytest.fixture(scope="session")
def desk_config():
    return main_effects_config(EVENTS)


@pytest.fixture(scope="session")
def desk_truth(desk_config):
    return reference_truth(desk_config, DESK_SHAPE)


@pytest.fixture(scope="session")
def desk_data(desk_config, desk_truth):
    return generate_synthetic(desk_truth, desk_config, DESK_SHAPE, seed=11)


@pytest.fixture(scope="session")
def desk_model(desk_config, desk_data):
    return Model(desk_config, desk_data)


@pytest.fixture(scope="session")
def quick_fit(desk_config, desk_data):
    """A short-budget fit shared by post-processing tests."""
    return fit_model(desk_config, desk_data,
                     SamplerConfig(chains=2, warmup=200, samples=200, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance reporting --------------------------------------------------

def pytest_configure(config):
    config._mpep_acceptance = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion outcomes, echoed in the terminal summary."""
    return request.config._mpep_acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_mpep_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
