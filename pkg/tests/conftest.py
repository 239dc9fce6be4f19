import numpy as np
import pytest

from uecbf import engine


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_report_header(config):
    return f"uecbf fast kernels available: {engine.HAVE_FAST_KERNELS}"


needs_kernels = pytest.mark.skipif(
    not engine.HAVE_FAST_KERNELS,
    reason="compiled fast kernels not built")
