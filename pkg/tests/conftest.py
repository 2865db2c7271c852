import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(autouse=True)
def _default_dtype_float64_guard():
    # verification maths runs in float64; tests construct dtypes explicitly,
    # this only guards against accidental global dtype changes leaking out
    before = torch.get_default_dtype()
    yield
    torch.set_default_dtype(before)
