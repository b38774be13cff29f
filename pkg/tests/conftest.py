import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _no_global_seed_leakage():
    # tests must seed their own generators; the legacy global state is pinned
    # so anything that reaches for it is at least deterministic
    np.random.seed(42)
    yield
