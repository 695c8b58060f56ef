import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_linear_net(*weights):
    """Identity-activation network from a list of weight matrices."""
    from mergeqp import LinearNetwork

    return LinearNetwork([np.asarray(W, dtype=float) for W in weights])


def make_relu_net(*weights):
    from mergeqp import LinearNetwork

    mats = [np.asarray(W, dtype=float) for W in weights]
    return LinearNetwork(mats, ["relu"] * (len(mats) - 1))
