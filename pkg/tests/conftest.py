import logging

import numpy as np
import pytest

from inlinecmr.sim import phantom

logging.getLogger("inlinecmr").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.RandomState(20240817)


@pytest.fixture
def small_params():
    """Small, fast phantom for end-to-end tests."""
    return phantom.PhantomParams(
        n_slices=3, n_phases=4, matrix=32, n_coils=2,
        pixel_spacing_mm=2.0, slice_thickness_mm=8.0, slice_spacing_mm=10.0,
        lax_matrix=64, perf_matrix=64, aif_matrix=32, aif_frames=24,
        seed=99)
