import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from grapy.tensor import set_default_dtype


@pytest.fixture(autouse=True)
def f64_default():
    """Tests run in 64-bit unless they opt into f32 themselves."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)
