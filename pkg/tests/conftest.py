import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from riunet.dataset import build_dataset, synthetic_sources  # noqa: E402
from riunet.projection import ProjectionConfig  # noqa: E402
from riunet.scene import SceneSpec  # noqa: E402

ACCEPTANCE_LINES = []

# a 16x64 sensor keeps unit tests fast; it still has ground, sky and objects
SMALL_PROJECTION = ProjectionConfig(width=64, height=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    base = SceneSpec(projection=SMALL_PROJECTION, spawn_range=(4.0, 15.0))
    return build_dataset(synthetic_sources(6, 11, base), root, SMALL_PROJECTION, seed=3, n_val=2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
