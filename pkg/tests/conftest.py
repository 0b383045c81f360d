import json
import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from voxelflow import _backend, nn, sampler

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = _backend.available()


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per importable kernel backend."""
    k = _backend.get(request.param)
    monkeypatch.setattr(nn, "_k", k)
    monkeypatch.setattr(sampler, "_k", k)
    return request.param


@pytest.fixture(scope="session")
def frozen():
    with open(os.path.join(os.path.dirname(__file__), "data", "frozen.json")) as f:
        return json.load(f)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
