from pathlib import Path

import numpy as np
import pytest

from moalign.data import load_pair, synth_paired_kgs

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def pair20():
    """Bundled zero-noise 20-entity pair: (kg1, kg2, seeds)."""
    return load_pair(FIXTURES / "pair20")


@pytest.fixture(scope="session")
def small_pair():
    return synth_paired_kgs(30, n_types=3, noise_sigma=0.05, rng=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Collects PASS/FAIL lines for the terminal summary."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
