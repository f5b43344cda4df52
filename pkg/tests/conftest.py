import numpy as np
import pytest

from coswin.roadnet import NetworkConfig

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net_cfg():
    """Smallest network that still exercises every stage (32x32 tiles)."""
    return NetworkConfig(tile_size=32, widths=(8, 8, 16), num_heads=(2, 2, 2))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
