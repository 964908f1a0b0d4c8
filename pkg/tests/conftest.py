import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from optresponse import (assemble_transfer_matrix, bump_noise, build_grid, invariant_density,
                         make_transfer_matrix, pomeau_manneville)

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_stochastic(n, rng, floor=0.01):
    P = rng.random((n, n)) ** 2 + floor
    return make_transfer_matrix(P / P.sum(axis=0))


@pytest.fixture(scope="session")
def pm200():
    g = build_grid(200)
    m = pomeau_manneville()
    nz = bump_noise(0.1)
    A = assemble_transfer_matrix(g, m, nz)
    return {"grid": g, "map": m, "noise": nz, "A": A, "f0": invariant_density(A)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
