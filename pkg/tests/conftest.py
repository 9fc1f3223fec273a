import os

# tiny desk-scale GEMMs run fastest (and bit-stably) on one BLAS thread;
# must be set before numpy initializes its thread pools
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
