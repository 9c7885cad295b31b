import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from refsr.diffusion import make_schedule


@pytest.fixture(autouse=True)
def _fixed_threads():
    torch.set_num_threads(2)


@pytest.fixture
def sched1000():
    return make_schedule(1000, "linear", 1e-4, 0.02)


@pytest.fixture
def rng():
    g = torch.Generator()
    g.manual_seed(0)
    return g
