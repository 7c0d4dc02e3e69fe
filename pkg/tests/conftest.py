import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the hot kernels once so timed tests never pay JIT cost."""
    from snapdb import kernels

    kernels.warm_up()
