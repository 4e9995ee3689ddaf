from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from runlmc import synth
from runlmc.datamodel import EventCatalog, PerformanceTable

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def catalog():
    return EventCatalog.default()


def power_law_table(exponents, coefs, catalog=None) -> PerformanceTable:
    """Time table of exact individual power laws ``t = c * s**alpha``."""
    catalog = catalog or EventCatalog.default()
    d = catalog.distances
    values = np.array([c * d**a for a, c in zip(exponents, coefs)])
    return PerformanceTable(values, catalog)


@pytest.fixture(scope="session")
def noisy_population():
    """1000 synthetic athletes, noise 0.01, complete, log-time."""
    return synth.generate(synth.SynthSpec(n_athletes=1000, noise_std=0.01, seed=11))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
