import numpy as np
import pytest

from mechmpc.gamerunner import truthful_profile
from mechmpc.scenario import default_scenario


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def truthful(scenario):
    """(messages, centralized solution) at the default game."""
    return truthful_profile(scenario)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_doc(**over):
    """Two scalar agents, quadratic costs minimized at the origin, unit input boxes."""
    doc = {
        "kind": "linear",
        "system": {"A": [[0.9, 0.1], [0.1, 0.8]], "B": [[1.0, 0.0], [0.0, 1.0]],
                   "partition": [[1, 1], [1, 1]], "horizon": 6, "x0": [0.0, 0.0]},
        "costs": [{"Q": [[1.0]], "R": [[1.0]], "P": [[1.0]]},
                  {"Q": [[2.0]], "R": [[0.5]], "P": [[2.0]]}],
        "sets": [{"input": {"lower": [-1.0], "upper": [1.0]}},
                 {"input": {"lower": [-1.0], "upper": [1.0]}}],
        "sim_length": 8,
        "seed": 7,
        "mechanism": {"tol": 1e-10, "exclusion_tol": 1e-12, "max_iter": 100},
        "learning": {"rounds": 50, "tol": 1e-6},
    }
    for k, v in over.items():
        doc[k] = v
    return doc


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
