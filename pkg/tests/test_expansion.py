import numpy as np
import pytest

from msmerton import expansion as X
from msmerton.model import instantiate_model
from msmerton.utility import make_utility

TS = np.array([0.0, 0.25, 0.5, 0.9])
XS = np.array([0.5, 1.0, 2.0])
VEGA_TOL = 1e-6


@pytest.fixture(scope="module")
def grid():
    return np.meshgrid(TS, XS, indexing="ij")


def test_first_order_terms_solve_their_equations(two_factor_bundle, grid):
    tt, xx = grid
    b = two_factor_bundle
    f, tb, spec = b.merton(0.3), b.thetas(0.3), b.spec
    scale = np.max(np.abs(f.M(tt, xx)))
    assert X.first_order_fast_pde_residual(f, tb, spec.rho1, tt, xx).max() < 1e-12 * scale
    assert X.first_order_slow_pde_residual(f, tb, spec.rho2, 0.5, tt, xx).max() < 1e-12 * scale


def test_slow_correction_two_forms_agree(two_factor_bundle, grid):
    tt, xx = grid
    b = two_factor_bundle
    f, tb, spec = b.merton(0.3), b.thetas(0.3), b.spec
    a = X.first_order_slow(f, tb, spec.rho2, 0.5, tt, xx)
    c = X.first_order_slow(f, tb, spec.rho2, 0.5, tt, xx, form="D1z")
    assert np.allclose(a, c, rtol=1e-12)


def test_fast_correction_power_two_closed_form(two_factor_bundle):
    # gamma = 2: D1^2 v0 = v0 / 4, so v10 = -(T - t) rho1 B v0 / 8
    b = two_factor_bundle
    f, tb = b.merton(0.0), b.thetas(0.0)
    t = np.array([0.0, 0.5])
    got = X.first_order_fast(f, tb, b.spec.rho1, t, 1.0)
    assert np.allclose(got, -(1.0 - t) * b.spec.rho1 * tb.B * f.M(t, 1.0) / 8, rtol=1e-13)


def test_vega_gamma_identities(two_factor_bundle):
    res = X.vega_gamma_residual(two_factor_bundle, [-0.5, 0.0, 0.3], TS, XS)
    assert res["v0_z"] < VEGA_TOL and res["R_z"] < VEGA_TOL


def test_vega_gamma_against_difference_quotient(two_factor_bundle, grid):
    tt, xx = grid
    b = two_factor_bundle
    z, h = 0.3, 1e-4
    fd = (b.merton(z + h).M(tt, xx) - b.merton(z - h).M(tt, xx)) / (2 * h)
    tb, f = b.thetas(z), b.merton(z)
    d1 = f.R(tt, xx) * f.partials(tt, xx)["x"]
    rhs = (1.0 - tt) * tb.lam_bar * tb.lam_bar_p * d1
    assert np.max(np.abs(fd - rhs)) < VEGA_TOL


def test_w20_solves_fast_poisson_equation(two_factor_bundle, grid):
    tt, xx = grid
    b = two_factor_bundle
    res = X.w20_poisson_residual(b.merton(0.3), b.thetas(0.3), b.spec, tt, xx,
                                 np.linspace(-3, 3, 13))
    assert res < 1e-8


def test_terminal_values(two_factor_bundle):
    assert X.terminal_check(two_factor_bundle, np.logspace(-1, 1, 9), 0.2) < 1e-12


def test_zeroth_strategy_worked_example():
    spec = instantiate_model(dict(lam0=0.5, lam_y=0.0, sigma0=0.5))
    b = X.ExpansionBundle(spec, make_utility(family="power", gamma=2.0))
    pi0 = X.zeroth_strategy(b)
    # mu = 0.25, sigma = 0.5, R = x / 2: holds half of wealth in the stock
    assert spec.mu(0.0, 0.0) == pytest.approx(0.25)
    x = np.array([0.5, 1.0, 4.0])
    assert np.allclose(pi0(0.3, x, 0.0, 0.0) / x, 0.5, rtol=1e-10)


def test_zeroth_strategy_uses_averaged_sharpe_ratio_in_R(fast_spec, power2):
    b = X.ExpansionBundle(fast_spec, power2)
    pi0 = X.zeroth_strategy(b)
    y = np.array([-1.0, 0.0, 2.0])
    lam = fast_spec.lam(y, 0.0)
    expect = lam / fast_spec.sigma(y, 0.0) * 1.0 / 2.0
    assert np.allclose(pi0(0.2, 1.0, y, 0.0), expect, rtol=1e-8)


def test_approx_value_components(two_factor_bundle):
    b = two_factor_bundle
    f, tb, spec = b.merton(0.1), b.thetas(0.1), b.spec
    v0 = f.M(0.0, 1.0)
    v10 = X.first_order_fast(f, tb, spec.rho1, 0.0, 1.0)
    v01 = X.first_order_slow(f, tb, spec.rho2, float(spec.g(0.1)), 0.0, 1.0)
    got = X.approx_value(b, 0.0, 1.0, 0.1, 0.04, 0.01)
    assert got == pytest.approx(v0 + 0.2 * v10 + 0.1 * v01, rel=1e-14)
    with pytest.raises(X.ExpansionError):
        X.approx_value(b, 0.0, 1.0, 0.1, -0.01, 0.0)


def test_constant_sharpe_ratio_collapse(power2):
    spec = instantiate_model(dict(lam_y=0.0, rho1=-0.5, rho2=0.3, rho12=0.2, delta=0.01))
    b = X.ExpansionBundle(spec, power2)
    tt, xx = np.meshgrid(TS, XS, indexing="ij")
    f, tb = b.merton(0.0), b.thetas(0.0)
    assert np.all(X.first_order_fast(f, tb, spec.rho1, tt, xx) == 0)
    assert np.all(X.first_order_slow(f, tb, spec.rho2, 0.5, tt, xx) == 0)
    for w in X.w_terms(f, tb, spec, tt, xx, np.linspace(-2, 2, 5)):
        assert np.all(w == 0)
    assert X.approx_value(b, 0.0, 1.0, 0.0, 0.04, 0.01) == f.M(0.0, 1.0)
