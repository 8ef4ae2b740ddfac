import numpy as np
import pytest

from models.pinching_builder import build

# enough multi-start restarts for the small dimensions used in the tests
TEST_RESTARTS = 8
SURGERY_THETA = 0.05


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def restarts():
    return TEST_RESTARTS


@pytest.fixture(scope="session")
def pinching_n5():
    """f for sigma0 = 1.5 and theta = 0.05 in dimension 5"""
    return build(1.5, SURGERY_THETA, 5)
