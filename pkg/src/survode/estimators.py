"""scikit-learn compatible wrappers.

``y`` is an ``(n, 2)`` array of ``(time, status)`` pairs. Formulas name
covariates by column position; ``None`` puts every column in every
predictor.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .hazard_models import FAMILY_PARAMS, ModelSpec
from .inference import find_map, sample_normal_approx
from .likelihood import LogPosterior, PriorSpec, SurvivalDataset, effective_sample_size_g
from .simulate import cumhaz_grid
from .varselect import gibbs_select


def _check_xy(X, y):
    X = check_array(X, dtype=float, ensure_min_features=0)
    y = check_array(y, dtype=float)
    if y.shape != (X.shape[0], 2):
        raise ValueError("y must have shape (n_samples, 2) holding (time, status)")
    return X, y


def concordance_index(times, status, risk) -> float:
    """Harrell's C: share of comparable pairs ordered correctly by ``risk``."""
    t, d, r = (np.asarray(a, dtype=float) for a in (times, status, risk))
    comparable = (t[:, None] < t[None, :]) & (d[:, None] == 1)
    if not comparable.any():
        return np.nan
    diff = r[:, None] - r[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].mean())


class _Base(BaseEstimator):
    def _spec(self, p: int, formulas=None) -> ModelSpec:
        d = len(FAMILY_PARAMS[self.family])
        formulas = formulas if formulas is not None else self.formulas
        if formulas is None:
            formulas = tuple(tuple(range(p)) for _ in range(d))
        return ModelSpec(self.family, formulas, h0=self.h0, q0=self.q0)

    def _priors(self, data, spec) -> PriorSpec:
        g = self.g
        if isinstance(g, str) and g == "ess":
            g = effective_sample_size_g(data, len(spec.param_names), self.g_divisors)
        return PriorSpec(intercept_sd=self.intercept_sd, coef_sd=self.coef_sd, g=g,
                         h0_prior=self.h0_prior, complexity_C=getattr(self, "complexity_C", 0.0))


class ODEHazardRegressor(_Base):
    """Maximum a posteriori fit of an ODE hazard regression model.

    After ``fit``: ``coef_`` (MAP vector), ``covariance_`` (inverse Hessian,
    when positive definite), ``fit_result_`` and ``log_evidence_``.
    ``predict`` returns the cumulative hazard at ``horizon`` as a risk
    score, so ``score`` is the concordance index.
    """

    def __init__(self, family="hazard_response", formulas=None, h0=0.01, q0=1e-6,
                 intercept_sd=10.0, coef_sd=10.0, g=None, g_divisors=None, h0_prior=None,
                 n_starts=3, horizon=None, n_threads=None):
        self.family = family
        self.formulas = formulas
        self.h0 = h0
        self.q0 = q0
        self.intercept_sd = intercept_sd
        self.coef_sd = coef_sd
        self.g = g
        self.g_divisors = g_divisors
        self.h0_prior = h0_prior
        self.n_starts = n_starts
        self.horizon = horizon
        self.n_threads = n_threads

    def fit(self, X, y, init=None):
        X, y = _check_xy(X, y)
        data = SurvivalDataset(y[:, 0], y[:, 1].astype(int), X)
        spec = self._spec(X.shape[1])
        spec.check_columns(X.shape[1])
        target = LogPosterior(data, spec, self._priors(data, spec), n_threads=self.n_threads)
        x0 = np.zeros(spec.n_params) if init is None else np.asarray(init, dtype=float)
        if init is None and spec.h0_free:
            x0[-1] = np.log(0.1)
        fit = find_map(target, x0, n_starts=self.n_starts)
        self.spec_ = spec
        self.fit_result_ = fit
        self.coef_ = fit.eta
        self.covariance_ = fit.covariance if fit.positive_definite else None
        self.log_evidence_ = fit.log_evidence
        self.n_features_in_ = X.shape[1]
        self.horizon_ = float(self.horizon) if self.horizon is not None else float(data.max_time)
        return self

    def predict_cumulative_hazard(self, X, times) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float, ensure_min_features=0)
        grid = np.asarray(times, dtype=float).reshape(-1)
        if grid[0] != 0.0:
            H = cumhaz_grid(self.spec_, self.coef_, X, np.concatenate([[0.0], grid]), self.n_threads)
            return H[:, 1:]
        return cumhaz_grid(self.spec_, self.coef_, X, grid, self.n_threads)

    def predict_survival(self, X, times) -> np.ndarray:
        return np.exp(-self.predict_cumulative_hazard(X, times))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        return self.predict_cumulative_hazard(X, [self.horizon_])[:, 0]

    def score(self, X, y) -> float:
        X, y = _check_xy(X, y)
        return concordance_index(y[:, 0], y[:, 1], self.predict(X))

    def sample_posterior(self, n_draws: int, seed: int):
        check_is_fitted(self, "coef_")
        return sample_normal_approx(self.fit_result_, n_draws, seed)


class ODEHazardSelector(_Base):
    """Gibbs covariate selection; ``mask_`` holds the median model."""

    def __init__(self, family="logistic", h0=0.01, q0=1e-6, intercept_sd=10.0, coef_sd=10.0,
                 g="ess", g_divisors=None, h0_prior=None, complexity_C=0.1, n_iter=50,
                 burn_in=5, seed=0):
        self.family = family
        self.h0 = h0
        self.q0 = q0
        self.intercept_sd = intercept_sd
        self.coef_sd = coef_sd
        self.g = g
        self.g_divisors = g_divisors
        self.h0_prior = h0_prior
        self.complexity_C = complexity_C
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.seed = seed

    formulas = None

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        data = SurvivalDataset(y[:, 0], y[:, 1].astype(int), X)
        d = len(FAMILY_PARAMS[self.family])
        spec = self._spec(X.shape[1], formulas=((),) * d)
        res = gibbs_select(data, spec, self._priors(data, spec), n_iter=self.n_iter,
                           burn_in=self.burn_in, seed=self.seed)
        self.result_ = res
        self.inclusion_probs_ = res.inclusion_probs
        self.mask_ = res.median
        self.model_probs_ = res.model_probs()
        self.n_features_in_ = X.shape[1]
        return self

    def transform_formulas(self):
        check_is_fitted(self, "mask_")
        return self.mask_.formulas()
