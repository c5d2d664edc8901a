import os

import numpy as np
import pytest

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(
    os.path.abspath(__file__))))
TESTDATA = os.path.join(REPO_ROOT, "testdata")


@pytest.fixture
def rng():
    return np.random.RandomState(424242)


@pytest.fixture
def worker_fixture_paths():
    return (os.path.join(TESTDATA, "worker", "worker_input.bin"),
            os.path.join(TESTDATA, "worker", "worker_reply.bin"))
