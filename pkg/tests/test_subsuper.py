import numpy as np
import pytest

from msmerton import subsuper as S
from msmerton.expansion import ExpansionBundle
from msmerton.model import instantiate_model

TS = np.array([0.0, 0.25, 0.5, 0.75, 0.999])
XS = np.logspace(-1, 1, 5)
YS = np.linspace(-4, 4, 9)
Z = 0.2
CONST = (1.0, 2.0, 3.0)


@pytest.fixture(scope="module")
def slab(two_factor_bundle):
    tt, xx = np.meshgrid(TS, XS, indexing="ij")
    return S.build_slab(two_factor_bundle, tt, xx, YS, Z)


@pytest.fixture(scope="module")
def sub_orders(slab):
    return S.q_pi0_orders(slab, slab.orders("sub", CONST))


@pytest.fixture(scope="module")
def super_orders(slab):
    return S.q_hat_orders(slab, slab.orders("super", CONST))


def _scale(orders):
    return max(float(np.max(np.abs(v))) for o, v in orders.items() if sum(o) == 2)


@pytest.mark.parametrize("which", ["sub", "super"])
def test_orders_below_eps_vanish(which, sub_orders, super_orders):
    q = sub_orders if which == "sub" else super_orders
    scale = _scale(q)
    low = [o for o in q if sum(o) < 2]
    assert low
    for o in low:
        assert np.max(np.abs(q[o])) <= 1e-10 * scale, o


@pytest.mark.parametrize("which", ["sub", "super"])
def test_leading_coefficients_do_not_depend_on_y(which, sub_orders, super_orders):
    q = sub_orders if which == "sub" else super_orders
    for o in [(2, 0), (0, 2), (1, 1)]:
        c = np.broadcast_to(q[o], TS.shape + XS.shape + YS.shape)
        mean = np.abs(c.mean(axis=-1))
        spread = np.max(np.abs(c - c[..., :1]), axis=-1)
        assert np.all(spread <= 1e-6 * mean + 1e-10), o


def test_eps_coefficient_matches_its_average(two_factor_bundle, sub_orders):
    tt, xx = np.meshgrid(TS, XS, indexing="ij")
    avg = S.average_i_eps_sub(two_factor_bundle, tt, xx, Z, CONST[0])
    assert np.max(np.abs(sub_orders[(2, 0)] - avg[..., None])) < 1e-10


def test_pi_star_maximizes(slab):
    parts = slab.orders("super", CONST)
    best = S.pi_star(slab, parts, 0.01, 0.01)
    q_best = S.q_pi_apply(slab, parts, 0.01, 0.01, best)
    q_hat, vxx = S.q_hat_apply(slab, parts, 0.01, 0.01)
    assert vxx < 0
    assert np.allclose(q_best, q_hat, rtol=1e-10, atol=1e-12)
    for f in (0.9, 1.1):
        assert np.all(S.q_pi_apply(slab, parts, 0.01, 0.01, f * best) <= q_best + 1e-14)


def test_convex_candidate_raises(slab):
    flipped = {o: {k: -v for k, v in p.items()} for o, p in slab.orders("super", CONST).items()}
    with pytest.raises(S.ConcavityError):
        S.q_hat_apply(slab, flipped, 0.01, 0.01)
    with pytest.raises(S.ConcavityError):
        S.pi_star(slab, flipped, 0.01, 0.01)


def test_candidates_differ_only_beyond_first_order(slab):
    sub, sup = slab.orders("sub", CONST), slab.orders("super", CONST)
    for o in sub:
        if sum(o) <= 1:
            assert np.array_equal(sub[o][""], sup[o][""])


def test_constant_sharpe_ratio_kills_correctors(power2):
    spec = instantiate_model(dict(lam_y=0.0, rho1=-0.4, rho2=0.3, rho12=0.2, delta=0.01))
    b = ExpansionBundle(spec, power2)
    tt, xx = np.meshgrid(TS, XS, indexing="ij")
    slab = S.build_slab(b, tt, xx, YS, 0.0)
    checked = 0
    for (label, order, const, tag), part in slab.groups.items():
        if label in ("F", "G", "H", "v10", "v01", "w20", "w30", "w21"):
            checked += 1
            for key, v in part.items():
                assert np.all(np.asarray(v) == 0), (label, tag, key)
    assert checked


def test_build_correctors_validates_variant():
    cs = S.build_correctors("sub", (1, 2, 3))
    assert cs.sign == -1.0 and cs.constants == {"A": 1.0, "B": 2.0, "C": 3.0}
    with pytest.raises(ValueError):
        S.build_correctors("middle")


@pytest.fixture(scope="module")
def verifier(two_factor_bundle):
    return S.GridVerifier(two_factor_bundle, S.default_grid(two_factor_bundle.spec))


def test_zero_constants_are_not_enough(verifier):
    rep = verifier.check((0.0, 0.0, 0.0), 0.01, 0.01)
    assert not all(S.passes(rep).values())


def test_calibration_finds_passing_constants(verifier):
    cal = S.calibrate_constants(verifier, 0.01, 0.01)
    assert all(S.passes(cal.report).values())
    assert cal.report["min_sandwich"] >= 0
    assert cal.binding in S.margins(cal.report)


def test_calibration_cap_reports_diagnostic(verifier):
    with pytest.raises(S.VerificationError, match="too large"):
        S.calibrate_constants(verifier, 0.01, 0.01, cap=0.5)


def test_grid_collapses_without_slow_dynamics():
    spec = instantiate_model(dict(delta=0.0, lam_z=0.0))
    assert len(S.default_grid(spec).z) == 1
