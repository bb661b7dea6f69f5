import numpy as np
import pytest

from cmdfit.likelihood import FieldRanges, PhotometryCatalog
from cmdfit.priors import ClusterPriorSpec
from cmdfit.stellar_model import ClusterParams, ToyModelConfig, toy_table


@pytest.fixture(scope="session")
def small_toy_config():
    return ToyModelConfig(
        mass_grid=tuple(np.geomspace(0.1, 8.0, 80)),
        age_grid=tuple(np.linspace(8.0, 9.7, 10)),
        feh_grid=(-0.5, 0.0, 0.5),
    )


@pytest.fixture(scope="session")
def small_table(small_toy_config):
    return toy_table(small_toy_config)


@pytest.fixture(scope="session")
def default_table():
    return toy_table(ToyModelConfig())


@pytest.fixture
def theta_mid():
    return ClusterParams(9.0, 0.0, 0.0, 2.0, 0.1)


@pytest.fixture
def prior_spec():
    return ClusterPriorSpec(
        feh=(0.0, 0.3), heh=(0.0, 0.3), dm=(2.0, 0.5), log_av=(np.log(0.1), 0.7)
    )


@pytest.fixture
def wide_ranges():
    return FieldRanges(np.array([4.0, 4.0]), np.array([17.0, 19.0]))


def make_catalog(x, sigma=0.05, pmember=0.8, filters=("V", "B")):
    x = np.asarray(x, dtype=float)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape).copy()
    sig[np.isnan(x)] = np.nan
    pm = np.broadcast_to(np.asarray(pmember, dtype=float), (x.shape[0],)).copy()
    ids = [f"t{i:03d}" for i in range(x.shape[0])]
    return PhotometryCatalog(ids, filters, x, sig, pm)
