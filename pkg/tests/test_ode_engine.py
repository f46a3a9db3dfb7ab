import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from survode import ode_engine, systems
from survode.hazard_models import logistic_cumhaz, logistic_hazard
from survode.ode_engine import IntegrationError, OdeSystem, evaluate_at, integrate, solve_at


def growth(y, p, out):
    out[0] = y[0]


def unit_slope(y, p, out):
    out[0] = 1.0


def blow_up(y, p, out):
    out[0] = y[0] * y[0]


def logistic_system(lam=1.0, kappa=2.0):
    return OdeSystem(2, systems.logistic_rhs, np.array([lam, kappa]))


def test_exponential_growth_at_one():
    traj = integrate(OdeSystem(1, growth), [1.0], 1.0)
    assert abs(traj.states[-1, 0] - math.e) < 1e-8
    assert traj.knots[0] == 0.0 and traj.knots[-1] == 1.0


def test_logistic_against_known_values():
    traj = integrate(logistic_system(), [0.5, 0.0], 1.0)
    h, H = traj.states[-1]
    assert h == pytest.approx(0.95073, abs=1e-5)
    assert H == pytest.approx(0.71474, abs=1e-5)


def test_zero_length_interval():
    traj = integrate(logistic_system(), [0.5, 0.0], 0.0)
    assert traj.knots.tolist() == [0.0]
    np.testing.assert_array_equal(traj.states[0], [0.5, 0.0])
    np.testing.assert_array_equal(traj.evaluate_at(0.0), [0.5, 0.0])


def test_knots_reproduced_exactly():
    traj = integrate(logistic_system(), [0.5, 0.0], 3.0)
    for i in (0, len(traj.knots) // 2, len(traj.knots) - 1):
        np.testing.assert_array_equal(evaluate_at(traj, traj.knots[i]), traj.states[i])


def test_linear_solution_interpolated_exactly():
    traj = integrate(OdeSystem(1, unit_slope), [0.0], 5.0)
    for t in np.linspace(0.0, 5.0, 37):
        assert abs(evaluate_at(traj, t)[0] - t) < 1e-12


def test_dense_output_matches_closed_form():
    traj = integrate(logistic_system(), [0.5, 0.0], 1.0)
    h, H = evaluate_at(traj, 0.5)
    assert abs(h - logistic_hazard(0.5, 1.0, 2.0, 0.5)) < 1e-6
    assert abs(H - logistic_cumhaz(0.5, 1.0, 2.0, 0.5)) < 1e-6


def test_out_of_range_query():
    traj = integrate(logistic_system(), [0.5, 0.0], 1.0)
    with pytest.raises(ValueError):
        evaluate_at(traj, 1.5)
    with pytest.raises(ValueError):
        evaluate_at(traj, -0.1)


def test_nonfinite_derivative_reports_time():
    # y' = y^2 from y0 = 1 blows up at t = 1
    with pytest.raises(IntegrationError) as info:
        integrate(OdeSystem(1, blow_up), [1.0], 2.0)
    assert 0.9 < info.value.t <= 1.0 + 1e-6


def test_step_budget_exhausted():
    with pytest.raises(IntegrationError) as info:
        integrate(logistic_system(), [0.5, 0.0], 100.0, max_steps=3)
    assert info.value.status == ode_engine.MAX_STEPS


def test_input_validation():
    with pytest.raises(ValueError):
        integrate(logistic_system(), [0.5], 1.0)
    with pytest.raises(ValueError):
        integrate(logistic_system(), [0.5, 0.0], np.inf)
    with pytest.raises(ValueError):
        integrate(logistic_system(), [0.5, 0.0], 1.0, rtol=0.0)


def test_trajectory_is_read_only():
    traj = integrate(logistic_system(), [0.5, 0.0], 1.0)
    with pytest.raises(ValueError):
        traj.states[0, 0] = 1.0


def test_integration_is_pure():
    a = integrate(logistic_system(0.7, 3.0), [0.1, 0.0], 7.0)
    b = integrate(logistic_system(0.7, 3.0), [0.1, 0.0], 7.0)
    np.testing.assert_array_equal(a.knots, b.knots)
    np.testing.assert_array_equal(a.states, b.states)


def test_solve_at_sorted_times():
    times = np.array([0.0, 0.25, 1.0, 4.0])
    y = solve_at(logistic_system(), [0.5, 0.0], times)
    np.testing.assert_allclose(y[:, 0], logistic_hazard(times, 1.0, 2.0, 0.5), atol=1e-7)
    with pytest.raises(ValueError):
        solve_at(logistic_system(), [0.5, 0.0], [1.0, 0.5])


def test_tighter_tolerance_never_worse():
    params = [(0.3, 0.5, 0.05), (1.0, 2.0, 0.5), (2.5, 1.0, 3.0), (4.0, 6.0, 0.01)]
    times = np.linspace(0.0, 10.0, 41)
    for lam, kappa, h0 in params:
        exact = logistic_cumhaz(times, lam, kappa, h0)
        errs = []
        for rtol, atol in ((1e-6, 1e-8), (5e-7, 5e-9), (2.5e-7, 2.5e-9)):
            y = solve_at(logistic_system(lam, kappa), [h0, 0.0], times, rtol=rtol, atol=atol)
            errs.append(np.max(np.abs(y[:, 1] - exact)))
        assert errs[1] <= errs[0] and errs[2] <= errs[1], (lam, kappa, h0, errs)


def test_batch_matches_single_solves():
    theta = np.array([[1.0, 2.0], [0.5, 0.3], [3.0, 1.0]])
    y0 = np.array([[0.5, 0.0], [0.1, 0.0], [2.0, 0.0]])
    t = np.array([1.0, 4.0, 0.2])
    out = np.empty((3, 2))
    status = np.zeros(3, dtype=np.int64)
    ode_engine.solve_batch_final(systems.logistic_rhs, theta, y0, t, 1e-8, 1e-10, 100000, out, status)
    assert (status == ode_engine.OK).all()
    for i in range(3):
        traj = integrate(logistic_system(*theta[i]), y0[i], t[i])
        np.testing.assert_array_equal(out[i], traj.states[-1])


@given(lam=st.floats(0.1, 5.0), kappa=st.floats(0.1, 5.0), alpha=st.floats(0.05, 5.0),
       mu=st.floats(0.1, 10.0), t_end=st.floats(0.5, 30.0))
def test_cumulative_hazard_non_decreasing(lam, kappa, alpha, mu, t_end):
    sys_ = OdeSystem(3, systems.hazard_response_rhs, np.array([lam, kappa, alpha, mu]))
    traj = integrate(sys_, [0.01, 1e-6, 0.0], t_end)
    assert (traj.states[:, 0] >= 0).all()
    assert (np.diff(traj.states[:, 2]) >= 0).all()
