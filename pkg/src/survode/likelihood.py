"""Right-censored log-likelihood, priors and log-posterior.

The log-likelihood of right-censored data with hazard h and cumulative hazard
H is ``sum_i status_i * log h(t_i) - H(t_i)``. For the hazard-response family
every individual needs one ODE solve on ``[0, t_i]``; these are done in chunks
of ``CHUNK`` rows, optionally on a thread pool, and the per-row terms are
reduced in a fixed order so the result does not depend on the thread count.

Invalid parameter regions (non-positive hazard, failed solve) give ``-inf``
rather than an exception.
"""
from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from . import ode_engine
from .hazard_models import (
    ModelSpec,
    as_eta,
    family_rhs,
    initial_hazard,
    initial_states,
    logistic_cumhaz,
    logistic_hazard,
    predictor_values,
)

CHUNK = 64
_LOG_2PI = math.log(2 * math.pi)


class CollinearityError(ValueError):
    """The Gram matrix of a predictor's included columns is singular."""


@dataclass(eq=False)
class SurvivalDataset:
    """Observed times, event indicators (1 = event) and covariates."""

    times: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    column_names: tuple = ()
    max_time: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        status = np.asarray(self.status)
        n = self.times.shape[0]
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if n else cov.reshape(0, 0)
        self.covariates = cov
        if status.shape != (n,) or cov.shape[0] != n:
            raise ValueError("times, status and covariates must have the same number of rows")
        if not np.isin(status, (0, 1)).all():
            bad = int(np.flatnonzero(~np.isin(status, (0, 1)))[0])
            raise ValueError(f"status must be 0/1 (row {bad})")
        self.status = status.astype(np.int64)
        if not (np.isfinite(self.times).all() and (self.times > 0).all()):
            raise ValueError("times must be positive and finite")
        if np.isnan(cov).any():
            raise ValueError("covariates contain NaN")
        if not self.column_names:
            self.column_names = tuple(f"x{j + 1}" for j in range(cov.shape[1]))
        self.column_names = tuple(self.column_names)
        if len(self.column_names) != cov.shape[1]:
            raise ValueError("column_names does not match the covariate matrix")
        if self.max_time is None:
            self.max_time = float(self.times.max()) if n else 0.0
        elif n and self.times.max() > self.max_time:
            raise ValueError("times exceed max_time")
        self._gram_cache = {}
        self._gram_lock = threading.Lock()

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_censored(self) -> int:
        return int((self.status == 0).sum())

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}") from None

    def gram(self, columns) -> np.ndarray:
        """``X_cols^T X_cols``, memoised per column tuple."""
        key = tuple(int(c) for c in columns)
        g = self._gram_cache.get(key)
        if g is None:
            Xc = self.covariates[:, list(key)]
            g = Xc.T @ Xc
            g.setflags(write=False)
            with self._gram_lock:
                self._gram_cache[key] = g
        return g

    def subset(self, idx) -> "SurvivalDataset":
        return SurvivalDataset(self.times[idx], self.status[idx], self.covariates[idx],
                               self.column_names, self.max_time, dict(self.metadata))


@dataclass(frozen=True)
class PriorSpec:
    """Priors on the parameter vector and on the model space.

    Intercepts get independent normals. Coefficients get a group g-prior per
    ODE parameter when ``g`` is given (one scale per parameter), otherwise
    independent ``normal(0, coef_sd)``. ``h0_prior`` is a ``(shape, rate)``
    gamma prior on h0, used only when h0 is free.
    """

    intercept_mean: float = 0.0
    intercept_sd: float = 10.0
    coef_sd: float = 10.0
    g: Optional[tuple] = None
    h0_prior: Optional[tuple] = None
    complexity_C: float = 0.0

    def __post_init__(self):
        sds = np.atleast_1d(np.asarray(self.intercept_sd, dtype=float))
        if not (sds > 0).all() or not self.coef_sd > 0:
            raise ValueError("prior standard deviations must be positive")
        if self.g is not None:
            object.__setattr__(self, "g", tuple(float(v) for v in self.g))
            if not all(v > 0 for v in self.g):
                raise ValueError("g scales must be positive")
        if self.h0_prior is not None:
            shape, rate = self.h0_prior
            if not (shape > 0 and rate > 0):
                raise ValueError("gamma shape and rate must be positive")
        if self.complexity_C < 0:
            raise ValueError("complexity_C must be non-negative")

    def intercept_sd_for(self, k: int) -> float:
        sds = np.atleast_1d(np.asarray(self.intercept_sd, dtype=float))
        return float(sds[k] if sds.size > 1 else sds[0])


def effective_sample_size_g(data: SurvivalDataset, n_params: int, divisors=None) -> tuple:
    """g scales ``(n - 0.5 c) / divisor_k``, c the number of censored rows."""
    base = data.n - 0.5 * data.n_censored
    divisors = divisors or [1.0] * n_params
    if len(divisors) != n_params:
        raise ValueError("one divisor per ODE parameter is required")
    return tuple(base / float(d) for d in divisors)


# -- thread pool ------------------------------------------------------------

_pools: dict = {}
_pools_lock = threading.Lock()


def default_threads() -> int:
    env = os.environ.get("SURVODE_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def _pool(n_threads: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(n_threads)
        if pool is None:
            pool = _pools[n_threads] = ThreadPoolExecutor(n_threads, thread_name_prefix="survode")
        return pool


def run_chunks(fn, n: int, n_threads: Optional[int]):
    starts = range(0, n, CHUNK)
    n_threads = default_threads() if n_threads is None else int(n_threads)
    if n_threads <= 1 or n <= CHUNK:
        for s in starts:
            fn(s, min(s + CHUNK, n))
        return
    futures = [_pool(n_threads).submit(fn, s, min(s + CHUNK, n)) for s in starts]
    for f in futures:
        f.result()


# -- hazard evaluation ------------------------------------------------------

def solve_final_states(spec: ModelSpec, eta, X, times, n_threads=None,
                       rtol=ode_engine.DEFAULT_RTOL, atol=ode_engine.DEFAULT_ATOL,
                       max_steps=ode_engine.DEFAULT_MAX_STEPS):
    """ODE state at ``times[i]`` for each row of ``X``; returns ``(states, status)``."""
    theta, _ = predictor_values(spec, eta, X)
    y0 = initial_states(spec, eta, theta)
    times = np.ascontiguousarray(times, dtype=float)
    n = times.shape[0]
    out = np.empty((n, spec.state_dim))
    status = np.zeros(n, dtype=np.int64)
    rhs = family_rhs(spec.family)

    def work(a, b):
        ode_engine.solve_batch_final(rhs, theta[a:b], y0[a:b], times[a:b], rtol, atol,
                                     max_steps, out[a:b], status[a:b])

    run_chunks(work, n, n_threads)
    return out, status


def hazard_terms(data: SurvivalDataset, spec: ModelSpec, eta, method="auto", n_threads=None,
                 rtol=ode_engine.DEFAULT_RTOL, atol=ode_engine.DEFAULT_ATOL):
    """Per-row ``(h(t_i), H(t_i), ok)``.

    ``method`` is ``"closed"`` (logistic only), ``"ode"`` or ``"auto"``.
    """
    eta = as_eta(spec, eta)
    if method == "auto":
        method = "closed" if spec.family == "logistic" else "ode"
    if method == "closed":
        if spec.family != "logistic":
            raise ValueError("closed form is only available for the logistic family")
        theta, _ = predictor_values(spec, eta, data.covariates)
        h0 = initial_hazard(spec, eta, theta)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            h = logistic_hazard(data.times, theta[:, 0], theta[:, 1], h0)
            H = logistic_cumhaz(data.times, theta[:, 0], theta[:, 1], h0)
        ok = np.isfinite(h) & np.isfinite(H) & (theta > 0).all(axis=1)
        return h, H, ok
    states, status = solve_final_states(spec, eta, data.covariates, data.times, n_threads,
                                        rtol, atol)
    ok = status == ode_engine.OK
    if any(link.kind == "identity" for link in spec.links):
        # every ODE parameter is a rate or a capacity and must be positive
        theta, _ = predictor_values(spec, eta, data.covariates)
        ok &= (theta > 0).all(axis=1)
    return states[:, 0], states[:, -1], ok


def log_likelihood(data: SurvivalDataset, spec: ModelSpec, eta, method="auto",
                   n_threads=None, rtol=ode_engine.DEFAULT_RTOL,
                   atol=ode_engine.DEFAULT_ATOL) -> float:
    h, H, ok = hazard_terms(data, spec, eta, method, n_threads, rtol, atol)
    if not ok.all():
        return -np.inf
    events = data.status == 1
    if (h[events] <= 0).any() or not np.isfinite(H).all():
        return -np.inf
    with np.errstate(divide="ignore"):
        terms = np.where(events, np.log(np.where(events, h, 1.0)), 0.0) - H
    # fixed-order reduction: chunk partials, then the partials left to right
    total = 0.0
    for s in range(0, terms.shape[0], CHUNK):
        total += float(np.sum(terms[s:s + CHUNK]))
    return total if np.isfinite(total) else -np.inf


# -- priors -----------------------------------------------------------------

def _normal_logpdf(x, mean, sd):
    return -0.5 * _LOG_2PI - math.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def g_prior_logpdf(beta, gram, g: float, label: str = "") -> float:
    """log N(beta | 0, g * gram^{-1})."""
    beta = np.asarray(beta, dtype=float)
    p = beta.shape[0]
    if p == 0:
        return 0.0
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise CollinearityError(f"singular Gram matrix in predictor block {label!r}") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    quad = float(beta @ gram @ beta)
    return -0.5 * p * (_LOG_2PI + math.log(g)) + 0.5 * logdet - 0.5 * quad / g


def log_prior(eta, spec: ModelSpec, priors: PriorSpec, design) -> float:
    """Log prior density of ``eta`` for the model whose formulas are in ``spec``.

    ``design`` is a ``SurvivalDataset`` (Gram matrices are cached on it) or a
    covariate matrix.
    """
    eta = as_eta(spec, eta)
    total = 0.0
    for k, (sl, cols, name) in enumerate(zip(spec.block_slices(), spec.formulas, spec.param_names)):
        b = eta[sl]
        total += _normal_logpdf(b[0], priors.intercept_mean, priors.intercept_sd_for(k))
        if not cols:
            continue
        if priors.g is not None:
            if isinstance(design, SurvivalDataset):
                gram = design.gram(cols)
            else:
                Xc = np.asarray(design, dtype=float)[:, list(cols)]
                gram = Xc.T @ Xc
            total += g_prior_logpdf(b[1:], gram, priors.g[k], name)
        else:
            total += float(np.sum([_normal_logpdf(v, 0.0, priors.coef_sd) for v in b[1:]]))
    if spec.h0_free and priors.h0_prior is not None:
        shape, rate = priors.h0_prior
        log_h0 = eta[-1]
        # gamma density of h0 carried to the log scale (Jacobian h0)
        total += (shape * math.log(rate) - special.gammaln(shape)
                  + shape * log_h0 - rate * math.exp(log_h0))
    return float(total)


def log_complexity_prior(n_active: int, C: float, d_tilde: int) -> float:
    """Unnormalised ``log d_tilde^{-C * n_active}``."""
    if C < 0:
        raise ValueError("C must be non-negative")
    if n_active == 0 or C == 0:
        return 0.0
    return -C * n_active * math.log(d_tilde)


def log_posterior(data: SurvivalDataset, spec: ModelSpec, eta, priors: PriorSpec,
                  n_threads=None, rtol=ode_engine.DEFAULT_RTOL,
                  atol=ode_engine.DEFAULT_ATOL) -> float:
    ll = log_likelihood(data, spec, eta, n_threads=n_threads, rtol=rtol, atol=atol)
    if ll == -np.inf:
        return -np.inf
    return ll + log_prior(eta, spec, priors, data)


class LogPosterior:
    """Callable ``eta -> log posterior`` bound to data, model and priors.

    Anything with this call signature can be handed to the optimiser and
    samplers in :mod:`survode.inference`.
    """

    def __init__(self, data: SurvivalDataset, spec: ModelSpec, priors: PriorSpec,
                 n_threads=None, rtol=ode_engine.DEFAULT_RTOL, atol=ode_engine.DEFAULT_ATOL):
        spec.check_columns(data.p)
        self.data = data
        self.spec = spec
        self.priors = priors
        self.n_threads = n_threads
        self.rtol = rtol
        self.atol = atol

    @property
    def dim(self) -> int:
        return self.spec.n_params

    @property
    def names(self) -> tuple:
        return tuple(self.spec.coefficient_names(self.data.column_names))

    def log_likelihood(self, eta) -> float:
        return log_likelihood(self.data, self.spec, eta, n_threads=self.n_threads,
                              rtol=self.rtol, atol=self.atol)

    def log_prior(self, eta) -> float:
        return log_prior(eta, self.spec, self.priors, self.data)

    def __call__(self, eta) -> float:
        return log_posterior(self.data, self.spec, eta, self.priors, self.n_threads,
                             self.rtol, self.atol)
