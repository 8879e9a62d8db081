import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msmerton.averaging import (THETA_NAMES, AveragingError, average, invariant_density,
                                sharpe_averages, solve_poisson, theta_family)
from msmerton.model import instantiate_model

POISSON_TOL = 1e-8
MEAN_TOL = 1e-10


@pytest.fixture(scope="module")
def ou():
    return instantiate_model({})


@pytest.fixture(scope="module")
def dens(ou):
    return invariant_density(ou)


def test_density_is_standard_normal_for_default_ou(ou, dens):
    # kappa = 1, a = sqrt 2: invariant law N(0, 1)
    assert dens.grid_average(np.ones_like(dens.y)) == pytest.approx(1.0, abs=1e-12)
    assert dens.grid_average(dens.y**2) == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(dens(dens.y[::400]), np.exp(-dens.y[::400] ** 2 / 2) / np.sqrt(2 * np.pi),
                       atol=1e-12)


def test_generator_is_centred_under_the_density(ou, dens):
    f = lambda y: np.exp(-((y - 0.3) ** 2))
    fp = lambda y: -2 * (y - 0.3) * f(y)
    fpp = lambda y: (4 * (y - 0.3) ** 2 - 2) * f(y)
    gen = lambda y: ou.b(y) * fp(y) + 0.5 * ou.a(y) ** 2 * fpp(y)
    assert abs(average(gen, dens)) < 1e-10


@pytest.mark.parametrize("rhs, theta", [(lambda y: y, lambda y: -y),
                                        (lambda y: y**2, lambda y: -(y**2) / 2 + 0.5)])
def test_poisson_worked_examples(ou, dens, rhs, theta):
    sol = solve_poisson(rhs, ou, dens)
    inner = np.abs(dens.y) <= 4
    assert np.max(np.abs(sol.theta[inner] - theta(dens.y[inner]))) < 1e-8
    assert sol.residual(4.0, 0.0, 1.0) < POISSON_TOL


def test_constant_rhs_gives_zero_solution(ou, dens):
    sol = solve_poisson(lambda y: 3.0 + 0 * y, ou, dens)
    assert sol.is_zero
    assert sol.rhs_mean == pytest.approx(3.0)


def test_non_finite_rhs_rejected(ou, dens):
    with pytest.raises(AveragingError):
        solve_poisson(lambda y: np.where(y > 0, np.inf, 0.0), ou, dens)


@pytest.mark.parametrize("cfg", [dict(), dict(lam_z=0.1, kappa_y=2.0, a=1.0)])
def test_theta_family_residuals_and_centering(cfg):
    spec = instantiate_model(cfg)
    tb = theta_family(spec, 0.2)
    for name in THETA_NAMES:
        th = tb[name]
        assert th.residual(4.0, spec.y_mean, spec.y_std) < POISSON_TOL, name
        assert abs(tb.density.grid_average(th.theta)) < MEAN_TOL, name


def test_B_two_routes_agree():
    spec = instantiate_model(dict(lam_z=0.1))
    tb = theta_family(spec, 0.1)
    assert tb.B == pytest.approx(tb.B_parts, rel=1e-10)


def test_constant_sharpe_ratio_collapses():
    spec = instantiate_model(dict(lam_y=0.0))
    tb = theta_family(spec, 0.0)
    assert all(tb[n].is_zero for n in ("theta", "theta1", "theta2"))
    assert tb.B == 0.0 and tb.B1 == 0.0
    assert tb.lam_bar == pytest.approx(0.3) and tb.lam_hat == pytest.approx(0.3)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(0.05, 0.5), st.floats(-1.0, 1.0))
def test_square_average_dominates_mean(lam_y, lam0, z):
    spec = instantiate_model(dict(lam0=lam0, lam_y=lam_y, lam_z=0.1))
    sc = sharpe_averages(spec, z, invariant_density(spec, n=2001))
    assert sc["lam_bar"] >= abs(sc["lam_hat"]) - 1e-12
    # lam_bar' via the catalog partials agrees with a difference quotient
    h = 1e-4
    up = sharpe_averages(spec, z + h, invariant_density(spec, n=2001))["lam_bar"]
    dn = sharpe_averages(spec, z - h, invariant_density(spec, n=2001))["lam_bar"]
    assert sc["lam_bar_p"] == pytest.approx((up - dn) / (2 * h), abs=1e-7)
