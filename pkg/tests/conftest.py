import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from biphasic_cycle import SimConfig, preset, simulate  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def p3539():
    return preset("35-39")


@pytest.fixture(scope="session")
def p2529():
    return preset("25-29")


@pytest.fixture(scope="session")
def small_sim(p3539):
    return simulate(SimConfig(p3539, 40, seed=123))


def series_with_onset(params, n_days=30, seed=0, max_length=None):
    """A simulated series of ``n_days`` days that contains a second onset."""
    max_length = max_length or n_days - 3
    for s in range(seed, seed + 500):
        cand = simulate(SimConfig(params, 1, seed=s, cycles_per_series=2))[0]
        if cand.meta["cycle_lengths"][0] <= max_length and cand.n_days >= n_days:
            return cand.truncated(n_days)
    raise RuntimeError("no suitable series found")


def tv(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * np.abs(p / p.sum(axis=-1, keepdims=True) - q / q.sum(axis=-1, keepdims=True)).sum(axis=-1)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
