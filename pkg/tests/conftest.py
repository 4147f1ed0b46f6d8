import numpy as np
import pytest

from fedbilevel.problems import make_data_cleaning, make_hyperrep, make_quadratic


@pytest.fixture(scope="session")
def quad_family():
    return make_quadratic(seed=11, M=4, p=6, d=8, sigma=0.0, zeta=0.6, mu=2.0, L=20.0)


@pytest.fixture(scope="session")
def quad_noisy():
    return make_quadratic(seed=13, M=4, p=5, d=6, sigma=0.5, zeta=0.4, mu=1.0, L=8.0)


@pytest.fixture(scope="session")
def cleaning_family():
    return make_data_cleaning(seed=21, M=6, classes=3, samples_per_client=40, rho=0.4)


@pytest.fixture(scope="session")
def hyperrep_family():
    return make_hyperrep(seed=31, M=3, tasks_per_client=2, n_way=3, k_shot=6, embed_dim=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
