import numpy as np
import pytest

from fdlora import kernels
from fdlora.federation import FederationConfig

# Filled by tests/test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    return kernels.available_backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """Fast desk-scale configuration (seconds, not minutes)."""
    return FederationConfig(
        num_clients=3,
        outer_rounds=4,
        inner_steps=2,
        sync_every=2,
        per_class=40,
        local_epochs=1,
        inner_lr=0.01,
        outer_lr=0.7,
        fusion_steps=2,
        fusion_shots=8,
    )
