import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from survode.hazard_models import ModelSpec
from survode.inference import (
    HESS_STEP,
    FitResult,
    HessianError,
    OptimizationError,
    PosteriorSample,
    SamplerError,
    adaptive_metropolis,
    credible_intervals,
    find_map,
    hessian_at,
    information_criteria,
    laplace_log_evidence,
    sample_normal_approx,
)
from survode.likelihood import LogPosterior, PriorSpec, SurvivalDataset
from survode.simulate import simulate_times, apply_censoring

LOG_2PI = math.log(2 * math.pi)


class Toy:
    """Callable target with an optional likelihood part and sample size."""

    def __init__(self, f, loglik=None, n=None):
        self.f, self._ll, self.n_obs = f, loglik, n

    def __call__(self, x):
        return self.f(np.asarray(x, dtype=float))

    def log_likelihood(self, x):
        return self._ll(np.asarray(x, dtype=float)) if self._ll else self(x)


def test_quadratic_map():
    fit = find_map(Toy(lambda x: -0.5 * (x[0] - 1) ** 2), [0.0])
    assert fit.eta[0] == pytest.approx(1.0, abs=1e-8)
    assert fit.converged
    assert fit.hessian[0, 0] == pytest.approx(1.0, abs=1e-5)


def test_quadratic_hessian_matrix():
    A = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
    H = hessian_at(lambda x: -0.5 * x @ A @ x, np.array([0.2, -0.1, 0.4]))
    np.testing.assert_allclose(H, A, atol=1e-5)
    np.testing.assert_array_equal(H, H.T)


def test_normal_density_curvature():
    sigma = 0.7
    H = hessian_at(lambda x: float(stats.norm.logpdf(x[0], 0.3, sigma)), np.array([0.5]))
    assert H[0, 0] == pytest.approx(1 / sigma ** 2, abs=1e-6)


def test_hessian_stencil_on_boundary_raises():
    f = lambda x: -np.inf if x[0] > 1.0 else -x[0] ** 2
    with pytest.raises(HessianError):
        hessian_at(f, np.array([1.0]))


def test_gaussian_evidence_is_exact():
    # one datum x = 0 with unit-variance likelihood and a standard normal prior
    ll = lambda e: -0.5 * LOG_2PI - 0.5 * e[0] ** 2
    fit = find_map(Toy(lambda e: 2 * ll(e), ll), [0.4])
    assert math.exp(fit.log_evidence) == pytest.approx(1 / math.sqrt(4 * math.pi), rel=1e-6)
    assert math.exp(fit.log_evidence) == pytest.approx(0.2821, abs=1e-4)


def test_zero_dimensional_evidence():
    fit = find_map(Toy(lambda e: -3.5, n=10), np.zeros(0))
    assert fit.log_evidence == -3.5
    assert fit.aic == fit.bic == 7.0


def test_non_pd_hessian_raises_for_evidence():
    fit = FitResult(np.zeros(1), 0.0, 0.0, hessian=np.array([[-1.0]]))
    with pytest.raises(HessianError):
        laplace_log_evidence(fit)
    with pytest.raises(HessianError):
        sample_normal_approx(fit, 10, 0)


def test_information_criteria():
    aic, bic = information_criteria(-100.0, 5, 100)
    assert aic == 210.0
    assert bic == pytest.approx(223.0259, abs=1e-4)
    assert information_criteria(-4.0, 0, 7) == (8.0, 8.0)


def test_all_starts_infinite_raise():
    with pytest.raises(OptimizationError):
        find_map(Toy(lambda x: -np.inf), [0.0, 0.0])


def test_exponential_intercept():
    spec = ModelSpec("logistic", ((), ()), h0="kappa")
    data = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 1], np.zeros((3, 0)))
    fit = find_map(LogPosterior(data, spec, PriorSpec(intercept_sd=1e6)), [0.0, 0.0])
    assert fit.eta[1] == pytest.approx(math.log(0.5), abs=1e-3)
    # lambda does not enter the likelihood, so only the flat prior curves it
    assert not fit.converged or fit.hessian[0, 0] < 1e-6


def _logistic_data(seed, n=300, horizon=4.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    spec = ModelSpec("logistic", ((0,), (1,)), h0=0.05)
    sim = simulate_times(spec, [0.0, 1.0, -1.0, 0.5], X, horizon, seed=seed)
    t, d = apply_censoring(sim.times, horizon, sim.beyond)
    return SurvivalDataset(np.maximum(t, 1e-8), d, X), spec


def test_hessian_step_halving_agrees():
    data, spec = _logistic_data(1)
    target = LogPosterior(data, spec, PriorSpec())
    fit = find_map(target, np.zeros(4), n_starts=1)
    H2 = hessian_at(target, fit.eta, HESS_STEP / 2)
    np.testing.assert_allclose(fit.hessian, H2, rtol=1e-3, atol=1e-3 * np.abs(fit.hessian).max())


def test_nested_evidence_stable_across_restarts():
    data, spec = _logistic_data(2)
    small = spec.with_formulas(((0,), ()))
    for s in (spec, small):
        target = LogPosterior(data, s, PriorSpec())
        evs = [find_map(target, np.zeros(s.n_params), n_starts=3, jitter_seed=k).log_evidence
               for k in (0, 1, 2)]
        assert max(evs) - min(evs) < 0.05


def test_find_map_is_deterministic():
    data, spec = _logistic_data(3, n=150)
    target = LogPosterior(data, spec, PriorSpec())
    a = find_map(target, np.zeros(4))
    b = find_map(target, np.zeros(4))
    np.testing.assert_array_equal(a.eta, b.eta)


def test_normal_approx_moments():
    A = np.array([[4.0, 1.0], [1.0, 2.0]])
    fit = FitResult(np.array([1.0, -2.0]), 0.0, 0.0, hessian=A, positive_definite=True)
    s = sample_normal_approx(fit, 10_000, seed=5)
    cov = np.linalg.inv(A)
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(s.draws.mean(0) - fit.eta) < 4 * sd / 100)
    np.testing.assert_allclose(np.cov(s.draws.T), cov, rtol=0.1)
    again = sample_normal_approx(fit, 10_000, seed=5)
    np.testing.assert_array_equal(s.draws, again.draws)


def test_identity_normal_approx_passes_ks():
    fit = FitResult(np.zeros(3), 0.0, 0.0, hessian=np.eye(3), positive_definite=True)
    s = sample_normal_approx(fit, 2000, seed=9)
    for j in range(3):
        assert stats.kstest(s.draws[:, j], "norm").pvalue > 0.01


def test_mcmc_standard_normal_moments():
    s = adaptive_metropolis(lambda x: -0.5 * float(x @ x), [0.5], n_iter=52_000, burn_in=2_000,
                            thin=10, seed=3)
    assert s.n == 5000
    assert abs(s.draws.mean()) < 0.05
    assert abs(s.draws.var() - 1.0) < 0.1
    assert 0.1 < s.acceptance_rate < 0.5


def test_mcmc_bimodal_mixing():
    def f(x):
        return float(np.logaddexp(-0.5 * (x[0] - 3) ** 2, -0.5 * (x[0] + 3) ** 2))

    s = adaptive_metropolis(f, [3.0], n_iter=21_000, burn_in=1_000, thin=1, seed=4)
    signs = np.sign(s.draws[:, 0])
    assert np.count_nonzero(np.diff(signs)) > 10


def test_mcmc_reproducible_and_validated():
    f = lambda x: -0.5 * float(x @ x)
    a = adaptive_metropolis(f, [0.0, 0.0], 600, 100, 5, seed=1)
    b = adaptive_metropolis(f, [0.0, 0.0], 600, 100, 5, seed=1)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.n == 100 and a.burn_in == 100 and a.thin == 5
    with pytest.raises(ValueError):
        adaptive_metropolis(lambda x: -np.inf, [0.0], 10, 2, 1, seed=0)


def test_mcmc_reports_collapse():
    # the only finite point is the start, so nothing is ever accepted
    f = lambda x: 0.0 if x[0] == 0.0 else -np.inf
    with pytest.raises(SamplerError):
        adaptive_metropolis(f, [0.0], 50, 10, 1, seed=0)


def test_credible_intervals():
    assert credible_intervals(np.arange(100.0), 0.5)[0].tolist() == [24.75, 74.25]
    const = credible_intervals(np.full((200, 1), 3.3))
    assert const[0, 0] == const[0, 1] == pytest.approx(3.3)
    z = np.random.default_rng(0).standard_normal(100_000)
    lo, hi = credible_intervals(z)[0]
    assert lo == pytest.approx(-1.96, abs=0.03) and hi == pytest.approx(1.96, abs=0.03)


def test_posterior_sample_validation():
    with pytest.raises(ValueError):
        PosteriorSample(np.array([[np.nan]]), "mcmc", 0)
    with pytest.raises(ValueError):
        PosteriorSample(np.zeros((1, 2)), "bootstrap", 0)


@settings(max_examples=20)
@given(st.floats(-5, 5), st.floats(0.2, 5.0))
def test_laplace_exact_for_any_gaussian(mu, sd):
    f = lambda x: float(stats.norm.logpdf(x[0], mu, sd))
    fit = find_map(Toy(f), [0.0], n_starts=1)
    # a normalised Gaussian integrates to one
    assert fit.log_evidence == pytest.approx(0.0, abs=1e-6)
