import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from relightgs import brdf  # noqa: E402


@pytest.fixture(scope="session")
def lut():
    return brdf.default_lut()


@pytest.fixture(scope="session")
def lut_grid(lut):
    return lut.torch_grid()
