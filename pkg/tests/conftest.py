import numpy as np
import pytest

@pytest.fixture
def rng():
    return np.random.default_rng(0)


def set_params(p, vec):
    q = p.copy()
    q.set_flat(vec)
    return q


def identity_adapter(d):
    """Single linear layer with identity weights and zero bias."""
    return init_params(np.eye(d), np.zeros(d))


def init_params(weight, bias):
    from anoadapt.adapter import AdapterParams

    return AdapterParams([np.asarray(weight, dtype=float)], [np.asarray(bias, dtype=float)])
