"""Shared fixtures: seeded generators, small networks and regions."""

import numpy as np
import pytest

from shiftguard.gaussian import Ellipsoid
from shiftguard.relu_net import ReluNetwork


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_relu_net(rng):
    """[3, 4, 2] ReLU network on a 2-D state and a scalar action."""
    return ReluNetwork.random((3, 4, 2), rng, "relu")


@pytest.fixture
def state_region():
    return Ellipsoid(np.array([0.2, -0.1]), np.array([[0.05, 0.01], [0.01, 0.03]]))


@pytest.fixture
def action_region():
    return Ellipsoid(np.array([0.3]), np.array([[0.04]]))


@pytest.fixture
def affine_net():
    """s' = A s + B a + c with a 2-D state and a scalar action."""
    a = np.array([[1.0, 0.1], [0.0, 0.9]])
    b = np.array([[0.2], [1.0]])
    c = np.array([0.05, -0.02])
    return ReluNetwork.affine(np.hstack([a, b]), c)
