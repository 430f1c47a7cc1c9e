import numpy as np
import pytest

from sidforge.catalog import CatalogSpec, generate_catalog

# one human-readable pass/fail line per acceptance criterion, emitted at
# the end of the run (see tests/test_acceptance.py)
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_catalog():
    """(2,2,2) tree, 64 items: fast enough for every functional test."""
    return generate_catalog(CatalogSpec(branching=(2, 2, 2), n_items=64,
                                        dv=4, dt=4, noise_std=0.2, seed=3))


@pytest.fixture(scope="session")
def medium_catalog():
    return generate_catalog(CatalogSpec(branching=(3, 3, 3), n_items=270,
                                        dv=8, dt=8, noise_std=0.3, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
