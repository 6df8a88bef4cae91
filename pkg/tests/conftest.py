import numpy as np
import pytest

from sepformer import ndkernel as nd


@pytest.fixture(autouse=True)
def _finite_checks():
    # every op output is scanned for NaN/Inf while tests run
    nd.set_debug_checks(True)
    yield
    nd.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
