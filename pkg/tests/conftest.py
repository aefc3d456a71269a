import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from radon_net.dataset import load_index, make_synthetic, split_classes  # noqa: E402
from radon_net.model import conv, dense, flatten, maxpool  # noqa: E402

SMALL_SPEC = [conv(4), maxpool(), conv(8), maxpool(), flatten(), dense(16)]
SMALL_INPUT = (1, 16, 16)


@pytest.fixture
def small_spec():
    return list(SMALL_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_small(tmp_path_factory):
    """8 classes x 3 images per domain at 16x16, split 6 known / 2 novel."""
    root = tmp_path_factory.mktemp("syn_small")
    manifest = make_synthetic(root, 8, 3, seed=5, size=16)
    return split_classes(load_index(manifest), 2, seed=1)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
