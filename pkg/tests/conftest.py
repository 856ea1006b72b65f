import numpy as np
import pytest

from betaplane.dynamics import Forcing, ModelParams
from betaplane.reduction import reduce_linearized
from betaplane.wave import newton_solve


@pytest.fixture(scope="session")
def params100():
    return ModelParams(lam=100.0, N_phi=8, N_x=8)


@pytest.fixture(scope="session")
def forcing100(params100):
    p = params100
    return Forcing.default(p.mmap, p.N_phi, p.N_x)


@pytest.fixture(scope="session")
def wave100(params100, forcing100):
    return newton_solve(params100, forcing100, tol=1e-12, max_iter=10)


@pytest.fixture(scope="session")
def reduced100(wave100):
    return reduce_linearized(wave100)


@pytest.fixture(scope="session")
def small_params():
    return ModelParams(lam=100.0, N_phi=4, N_x=4)


@pytest.fixture(scope="session")
def small_wave(small_params):
    p = small_params
    return newton_solve(p, Forcing.default(p.mmap, p.N_phi, p.N_x), tol=1e-12, max_iter=10)


@pytest.fixture(scope="session")
def small_reduced(small_wave):
    return reduce_linearized(small_wave)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
