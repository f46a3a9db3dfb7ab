import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from survode import systems
from survode.hazard_models import (
    IDENTITY,
    LOG,
    OVERFLOW_CAP,
    AttractorKind,
    HazardResponseParams,
    LinkFunction,
    LogisticParams,
    ModelSpec,
    ParamVector,
    classify_attractor,
    eval_predictors,
    hazard_response_rhs,
    logistic_cumhaz,
    logistic_hazard,
    predictor_values,
)
from survode.ode_engine import OdeSystem, integrate, solve_at

SCENARIO = np.array([1.5, 0.5, 0.5, -0.5, 1.0, 0.5, 3.0, -0.5])


def hr_spec(**kw):
    return ModelSpec("hazard_response", ((0,), (1,), (2,), (3,)), **kw)


def test_zero_slopes_give_intercepts():
    spec = ModelSpec("logistic", ((0,), (0,)))
    p = eval_predictors(spec, [math.log(2), 0.0, math.log(3), 0.0], [5.0])
    assert isinstance(p, LogisticParams)
    assert p.lam == pytest.approx(2.0, rel=1e-15)
    assert p.kappa == pytest.approx(3.0, rel=1e-15)


def test_scenario_substitution():
    p = eval_predictors(hr_spec(), SCENARIO, [1, 1, 0, 0])
    assert p.lam == pytest.approx(math.exp(2.0))
    assert p.kappa == pytest.approx(1.0)
    assert p.alpha == pytest.approx(math.exp(1.0))
    assert p.mu == pytest.approx(math.exp(3.0))
    assert (p.h0, p.q0) == (0.01, 1e-6)


def test_identity_link_rejected_for_positive_parameter():
    with pytest.raises(ValueError):
        ModelSpec("logistic", ((), ()), links=("identity", "log"))
    spec = ModelSpec("logistic", ((), ()), links=("identity", "log"), strict_links=False)
    with pytest.raises(ValueError):
        eval_predictors(spec, [-1.0, 0.0], [])


def test_overflow_saturates_and_flags():
    spec = ModelSpec("logistic", ((), ()))
    theta, saturated = predictor_values(spec, [100.0, 0.0], np.zeros((1, 0)))
    assert saturated
    assert theta[0, 0] == OVERFLOW_CAP


def test_nan_input_rejected():
    with pytest.raises(ValueError):
        eval_predictors(ModelSpec("logistic", ((0,), ())), [0.0, 0.0, 0.0], [np.nan])


def test_link_round_trip():
    theta = np.array([1e-8, 0.3, 1.0, 7.5, 1e6])
    np.testing.assert_allclose(LOG.inverse(LOG.forward(theta)), theta, rtol=4e-15)
    np.testing.assert_array_equal(IDENTITY.inverse(IDENTITY.forward(theta)), theta)
    with pytest.raises(ValueError):
        LinkFunction("probit")


def test_parameter_types_validate():
    with pytest.raises(ValueError):
        LogisticParams(1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        HazardResponseParams(1.0, 1.0, -1.0, 1.0)


def test_spec_parameter_count_and_names():
    spec = ModelSpec("logistic", ((0, 2), (1,)), h0=None)
    assert spec.n_params == 3 + 2 + 1
    assert spec.coefficient_names(["a", "b", "c"]) == [
        "lambda:(intercept)", "lambda:a", "lambda:c", "kappa:(intercept)", "kappa:b", "log_h0"]
    with pytest.raises(ValueError):
        hr_spec(h0=None)
    with pytest.raises(ValueError):
        ModelSpec("logistic", ((0,),))
    with pytest.raises(ValueError):
        spec.check_columns(2)


def test_param_vector_round_trip():
    spec = ModelSpec("logistic", ((0, 2), (1,)), h0=None)
    eta = np.arange(6.0)
    pv = ParamVector.from_array(spec, eta)
    np.testing.assert_array_equal(pv.to_array(), eta)
    with pytest.raises(ValueError):
        ParamVector(((0.0, [np.inf]),)).to_array()


def test_logistic_initial_conditions():
    assert logistic_hazard(0.0, 1.3, 2.0, 0.4) == pytest.approx(0.4)
    assert logistic_cumhaz(0.0, 1.3, 2.0, 0.4) == 0.0


def test_logistic_equilibrium():
    t = np.linspace(0, 50, 11)
    np.testing.assert_allclose(logistic_hazard(t, 0.8, 2.5, 2.5), 2.5, rtol=1e-14)
    np.testing.assert_allclose(logistic_cumhaz(t, 0.8, 2.5, 2.5), 2.5 * t, rtol=1e-13)


def test_logistic_reference_point():
    assert logistic_hazard(1.0, 1.0, 2.0, 0.5) == pytest.approx(0.95073, abs=1e-5)
    assert logistic_cumhaz(1.0, 1.0, 2.0, 0.5) == pytest.approx(0.71474, abs=1e-5)


def test_logistic_large_time_is_finite():
    t = np.array([1e3, 1e5])
    H = logistic_cumhaz(t, 5.0, 2.0, 0.01)
    assert np.isfinite(H).all()
    # H approaches kappa t + (kappa / lambda) log(h0 / kappa)
    np.testing.assert_allclose(H, 2.0 * t + 2.0 / 5.0 * math.log(0.01 / 2.0), rtol=1e-12)
    assert logistic_hazard(1e5, 5.0, 2.0, 0.01) == pytest.approx(2.0)


def test_hazard_response_rhs_cases():
    p = HazardResponseParams(1.3, 2.0, 0.7, 0.9)
    d = hazard_response_rhs([0.4, 0.0, 1.0], p)
    assert d[0] == pytest.approx(1.3 * 0.4 * (1 - 0.4 / 2.0))
    # alpha is positive in the parameter type, so check the fixed point through the raw rhs
    out = np.empty(3)
    systems.hazard_response_rhs(np.array([2.0, 2.0, 0.0]), np.array([1.3, 2.0, 0.0, 0.9]), out)
    assert out[0] == 0.0 and out[1] == 0.0 and out[2] == 2.0


def test_hazard_response_rhs_substitution():
    lam, kappa, alpha, mu = math.exp(1.5), math.exp(0.5), math.exp(1.0), math.exp(3.0)
    p = HazardResponseParams(lam, kappa, alpha, mu)
    h, q = 0.01, 1e-6
    d = hazard_response_rhs([h, q, 0.0], p)
    assert d[0] == pytest.approx(lam * h * (1 - h / kappa) - alpha * q * h, rel=1e-15)
    assert d[1] == pytest.approx(mu * q * (1 - q / kappa) - alpha * q * h, rel=1e-15)
    assert d[2] == h
    # hand evaluation
    assert d[0] == pytest.approx(0.0445450353, rel=1e-9)


@pytest.mark.parametrize("params, kind, D, h_star, q_star, limit", [
    # D < 0 with q* < 0: (0, kappa) is the stable corner since lambda < alpha kappa < mu
    ((1.0, 1.0, 1.5, 2.0), AttractorKind.RESPONSE_WINS, -0.125, 4.0, -2.0, 0.0),
    ((2.0, 1.0, 0.8, 0.5), AttractorKind.HAZARD_WINS, 0.36, 5 / 3, -5 / 3, 1.0),
    ((2.0, 1.0, 1.5, 1.0), AttractorKind.HAZARD_WINS, -0.125, -2.0, 4.0, 1.0),
    ((0.5, 1.0, 0.8, 2.0), AttractorKind.RESPONSE_WINS, 0.36, -5 / 3, 5 / 3, 0.0),
    ((1.0, 1.0, 0.5, 1.0), AttractorKind.COEXISTENCE, 0.75, 2 / 3, 2 / 3, 2 / 3),
])
def test_attractor_examples(params, kind, D, h_star, q_star, limit):
    lam, kappa, alpha, mu = params
    a = classify_attractor(HazardResponseParams(lam, kappa, alpha, mu))
    assert a.kind is kind
    assert a.D == pytest.approx(D)
    assert a.h_star == pytest.approx(h_star)
    assert a.q_star == pytest.approx(q_star)
    sys_ = OdeSystem(3, systems.hazard_response_rhs, np.array([lam, kappa, alpha, mu]))
    h_end = integrate(sys_, [0.01, 1e-6, 0.0], 500.0).states[-1, 0]
    assert h_end == pytest.approx(limit, abs=1e-3)


def test_degenerate_attractor():
    # alpha kappa = sqrt(lambda mu) makes D vanish
    a = classify_attractor(HazardResponseParams(1.0, 1.0, 1.0, 1.0))
    assert a.kind is AttractorKind.DEGENERATE


def test_bistable_when_saddle():
    a = classify_attractor(HazardResponseParams(1.0, 1.0, 2.0, 1.0))
    assert a.D < 0 and a.h_star > 0 and a.q_star > 0
    assert a.kind is AttractorKind.BISTABLE


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_zero_slopes_are_covariate_invariant(x1, x2):
    eta = np.array([0.2, 0.0, -0.1, 0.0, 0.3, 0.0, 1.0, 0.0])
    a = eval_predictors(hr_spec(), eta, x1)
    b = eval_predictors(hr_spec(), eta, x2)
    assert a == b


def test_closed_form_matches_solver_on_random_draws(rng):
    t = np.linspace(0.0, 10.0, 101)
    for _ in range(100):
        lam, kappa, h0 = np.exp(rng.uniform(-2, 2, 3))
        y = solve_at(OdeSystem(2, systems.logistic_rhs, np.array([lam, kappa])), [h0, 0.0], t)
        assert np.max(np.abs(y[:, 0] - logistic_hazard(t, lam, kappa, h0))) < 1e-6
        assert np.max(np.abs(y[:, 1] - logistic_cumhaz(t, lam, kappa, h0))) < 1e-6


def test_initial_values_both_families():
    spec = ModelSpec("logistic", ((), ()), h0=0.3)
    p = eval_predictors(spec, [0.1, 0.2], [])
    assert logistic_hazard(0.0, p.lam, p.kappa, p.h0) == 0.3
    sys_ = OdeSystem(3, systems.hazard_response_rhs, np.array([1.0, 1.0, 0.5, 1.0]))
    traj = integrate(sys_, [0.01, 1e-6, 0.0], 0.0)
    np.testing.assert_array_equal(traj.states[0], [0.01, 1e-6, 0.0])


def _long_time_limit(lam, kappa, alpha, mu):
    sys_ = OdeSystem(3, systems.hazard_response_rhs, np.array([lam, kappa, alpha, mu]))
    h, q = integrate(sys_, [0.01, 1e-6, 0.0], 500.0).states[-1, :2]
    return h, q


def test_classifier_agrees_with_integration(rng):
    checked = 0
    while checked < 60:
        lam, kappa, alpha, mu = np.exp(rng.uniform(-1.5, 1.5, 4))
        a = classify_attractor(HazardResponseParams(lam, kappa, alpha, mu))
        if a.kind is AttractorKind.DEGENERATE or min(abs(a.h_star), abs(a.q_star)) < 0.01:
            continue
        h, _ = _long_time_limit(lam, kappa, alpha, mu)
        expected = {AttractorKind.HAZARD_WINS: kappa, AttractorKind.RESPONSE_WINS: 0.0,
                    AttractorKind.COEXISTENCE: a.h_star}
        if a.kind is AttractorKind.BISTABLE:
            assert min(abs(h), abs(h - kappa)) < 1e-3 * max(kappa, 1)
        else:
            assert h == pytest.approx(expected[a.kind], abs=1e-3 * max(kappa, 1))
        checked += 1
