import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semi3net.backbone import BackboneConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return BackboneConfig(in_channels=3, stages=((1, 4), (1, 8)), fc_dims=(16,), embed_dim=8,
                          num_classes=3, input_size=8)


@pytest.fixture
def desk_config():
    return BackboneConfig(in_channels=3, stages=((1, 8), (1, 16)), fc_dims=(64,), embed_dim=32,
                          num_classes=8, input_size=16)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
