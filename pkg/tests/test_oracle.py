import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msmerton import oracle as O
from msmerton.expansion import ExpansionBundle, zeroth_strategy
from msmerton.model import instantiate_model
from msmerton.montecarlo import SimConfig, simulate_paths, standard_error
from msmerton.utility import make_utility

YS = np.linspace(-3, 3, 7)


def test_log_utility_rejected(fast_spec):
    with pytest.raises(O.OracleError):
        O.solve_distortion(1.0, fast_spec, 0.02)
    with pytest.raises(O.OracleError):
        O.solve_distortion(-1.0, fast_spec, 0.02)


def test_exponent_without_correlation_is_one():
    assert O.distortion_exponent(3.0, 0.0) == 1.0


def test_constant_sharpe_ratio_reduces_to_merton():
    spec = instantiate_model(dict(lam_y=0.0, rho1=-0.5))
    field = O.solve_distortion(2.0, spec, 0.05, n_modes=32)
    got = field.value(0.25, np.array([0.5, 1.0, 2.0]), 0.7)
    assert np.allclose(got, O.merton_partials(2.0, 0.3, 1.0, 0.25, np.array([0.5, 1.0, 2.0]))[""],
                       rtol=1e-12)


@pytest.mark.parametrize("eps", [0.32, 0.02])
def test_hjb_residual_small(fast_spec, eps):
    spec = fast_spec.with_scales(eps=eps)
    field = O.solve_distortion(2.0, spec, eps)
    for t in (0.0, 0.3, 0.8):
        res = O.hjb_residual(field.partials(t, 1.5, YS), spec, YS, 0.0, eps, 0.0)
        assert np.max(np.abs(res)) < 1e-8 * np.max(np.abs(field.value(t, 1.5, YS)))


def test_residual_flags_a_wrong_candidate(fast_spec):
    V = O.merton_partials(2.0, 0.3, 1.0, 0.2, np.ones_like(YS))
    res = O.hjb_residual(V, fast_spec, YS, 0.0, 0.02, 0.0)
    assert np.max(np.abs(res)) > 1e-3


def test_residual_refuses_convex_candidate(fast_spec):
    V = O.merton_partials(2.0, 0.3, 1.0, 0.2, np.ones_like(YS))
    V["xx"] = -V["xx"]
    with pytest.raises(O.OracleError):
        O.hjb_residual(V, fast_spec, YS, 0.0, 0.02, 0.0)


def test_mode_convergence(fast_spec):
    spec = fast_spec.with_scales(eps=0.08)
    ref = O.solve_distortion(2.0, spec, 0.08, n_modes=256).value(0.0, 1.0, YS)
    errs = [np.max(np.abs(O.solve_distortion(2.0, spec, 0.08, n_modes=n, validate=False)
                          .value(0.0, 1.0, YS) - ref)) for n in (16, 32, 64)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-8


@settings(max_examples=10, deadline=None)
@given(st.floats(0.5, 4.0).filter(lambda g: abs(g - 1) > 0.05), st.floats(-0.8, 0.8))
def test_distortion_value_has_utility_sign_and_matches_merton_at_maturity(gamma, rho1):
    spec = instantiate_model(dict(rho1=rho1))
    field = O.solve_distortion(gamma, spec, 0.1, n_modes=48, validate=False)
    u = make_utility(family="power", gamma=gamma).U(2.0)
    assert np.allclose(field.value(1.0, 2.0, YS), u, rtol=1e-13)
    assert np.all(np.sign(field.value(0.0, 2.0, YS)) == np.sign(u))


def test_zeroth_strategy_does_not_beat_the_optimum(fast_spec, power2):
    spec = fast_spec.with_scales(eps=0.08)
    stats = simulate_paths(spec, zeroth_strategy(ExpansionBundle(spec, power2)),
                           SimConfig(20000, 200, seed=11, antithetic=True,
                                     fast_scheme="implicit"), power2)
    best = float(O.solve_distortion(2.0, spec, 0.08).value(0.0, 1.0, spec.y_mean))
    assert stats.mean <= best + 3 * standard_error(stats)


def test_dump_csv(tmp_path, fast_spec):
    field = O.solve_distortion(2.0, fast_spec, 0.02, n_modes=32, validate=False)
    path = tmp_path / "oracle.csv"
    O.dump_csv(field, path, [0.0], [1.0], [0.0, 1.0])
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,y,V" and len(lines) == 3
