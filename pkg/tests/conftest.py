import pytest

from msmerton.expansion import ExpansionBundle
from msmerton.model import instantiate_model
from msmerton.utility import make_utility

# one fast factor with leverage; the reference setting for rate and Monte Carlo checks
FAST_ONLY = dict(rho1=-0.5, lam0=0.3, lam_y=0.2)
# both factors active, lam depends on z
TWO_FACTOR = dict(rho1=-0.4, rho2=0.3, rho12=0.2, lam_z=0.1, eps=0.01, delta=0.01)


@pytest.fixture(scope="session")
def power2():
    return make_utility(family="power", gamma=2.0)


@pytest.fixture(scope="session")
def fast_spec():
    return instantiate_model(dict(FAST_ONLY, eps=0.02))


@pytest.fixture(scope="session")
def two_factor_spec():
    return instantiate_model(TWO_FACTOR)


@pytest.fixture(scope="session")
def two_factor_bundle(two_factor_spec, power2):
    return ExpansionBundle(two_factor_spec, power2)
