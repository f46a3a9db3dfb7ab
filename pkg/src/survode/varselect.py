"""Bayesian covariate selection by Gibbs sampling over inclusion masks.

Each model is scored by its Laplace log evidence plus the complexity prior
``-C |gamma| log d``. A systematic sweep visits every candidate (parameter,
covariate) pair and flips it with its full-conditional probability. Fitted
models are memoised by mask so revisits cost nothing.
"""
from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .hazard_models import ModelSpec
from .inference import FitResult, HessianError, OptimizationError, find_map
from .likelihood import (
    CollinearityError,
    LogPosterior,
    PriorSpec,
    SurvivalDataset,
    log_complexity_prior,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InclusionMask:
    """Binary ``d x p`` matrix: row k lists the covariates in predictor k."""

    bits: tuple

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ValueError("mask must be a 2-D array")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "bits", tuple(tuple(int(v) for v in row) for row in arr))

    @classmethod
    def empty(cls, d: int, p: int) -> "InclusionMask":
        return cls(np.zeros((d, p), dtype=int))

    @classmethod
    def from_key(cls, key: str) -> "InclusionMask":
        rows = key.split("|")
        if len({len(r) for r in rows}) != 1 or any(set(r) - {"0", "1"} for r in rows):
            raise ValueError(f"malformed mask key {key!r}")
        return cls([[int(c) for c in r] for r in rows])

    @classmethod
    def from_formulas(cls, formulas, p: int) -> "InclusionMask":
        arr = np.zeros((len(formulas), p), dtype=int)
        for k, cols in enumerate(formulas):
            arr[k, list(cols)] = 1
        return cls(arr)

    @property
    def key(self) -> str:
        return "|".join("".join(str(v) for v in row) for row in self.bits)

    def __str__(self) -> str:
        return self.key

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=int)

    @property
    def shape(self):
        return len(self.bits), len(self.bits[0]) if self.bits else 0

    @property
    def n_active(self) -> int:
        return int(sum(sum(r) for r in self.bits))

    def formulas(self) -> tuple:
        return tuple(tuple(j for j, v in enumerate(row) if v) for row in self.bits)

    def flipped(self, k: int, j: int) -> "InclusionMask":
        arr = self.array
        arr[k, j] ^= 1
        return InclusionMask(arr)


@dataclass(frozen=True)
class CachedModel:
    log_evidence: float
    eta: Optional[np.ndarray]
    log_post: float = -np.inf
    converged: bool = False


class ModelCache:
    """Mask key to fitted-model summary. Safe for concurrent use."""

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[CachedModel]:
        with self._lock:
            return self._store.get(key)

    def put(self, key: str, value: CachedModel) -> CachedModel:
        with self._lock:
            return self._store.setdefault(key, value)

    def __contains__(self, key) -> bool:
        with self._lock:
            return key in self._store

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)

    def items(self):
        with self._lock:
            return list(self._store.items())


def flip_probability(log_ev_new: float, log_prior_new: float,
                     log_ev_old: float, log_prior_old: float) -> float:
    """Probability of moving to the proposed mask under its full conditional."""
    a = log_ev_new + log_prior_new
    b = log_ev_old + log_prior_old
    if a == -np.inf and b == -np.inf:
        raise ValueError("both models have zero posterior weight")
    if a == -np.inf:
        return 0.0
    if b == -np.inf:
        return 1.0
    return float(special.expit(a - b))


def median_model(inclusion_probs) -> InclusionMask:
    """Covariates whose inclusion probability is strictly above 1/2."""
    probs = np.asarray(inclusion_probs, dtype=float)
    if probs.ndim == 1:
        probs = probs[None, :]
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return InclusionMask((probs > 0.5).astype(int))


def model_posterior_probs(cache, complexity_C: float, d_tilde: int) -> dict:
    """Posterior model probabilities normalised over the visited (cached) masks."""
    items = cache.items() if isinstance(cache, ModelCache) else list(cache.items())
    if not items:
        raise ValueError("no models to normalise over")
    keys, scores = [], []
    for key, value in items:
        ev = value.log_evidence if isinstance(value, CachedModel) else float(value)
        n_active = InclusionMask.from_key(key).n_active
        keys.append(key)
        scores.append(ev + log_complexity_prior(n_active, complexity_C, d_tilde))
    scores = np.array(scores)
    if np.all(scores == -np.inf):
        raise ValueError("every cached model has -inf evidence")
    w = np.exp(scores - special.logsumexp(scores))
    return dict(zip(keys, w / w.sum()))


@dataclass
class SelectionResult:
    visits: Counter
    cache: ModelCache
    inclusion_probs: np.ndarray
    trace: list = field(default_factory=list)
    d_tilde: int = 0
    complexity_C: float = 0.0

    @property
    def median(self) -> InclusionMask:
        return median_model(self.inclusion_probs)

    def model_probs(self) -> dict:
        return model_posterior_probs(self.cache, self.complexity_C, self.d_tilde)


def _warm_start(spec_from: ModelSpec, eta_from, spec_to: ModelSpec) -> np.ndarray:
    """Copy shared intercepts and coefficients; new coefficients start at 0."""
    out = np.zeros(spec_to.n_params)
    if eta_from is None:
        return out
    src = {}
    for k, (sl, cols) in enumerate(zip(spec_from.block_slices(), spec_from.formulas)):
        b = eta_from[sl]
        src[(k, None)] = b[0]
        for c, v in zip(cols, b[1:]):
            src[(k, c)] = v
    for k, (sl, cols) in enumerate(zip(spec_to.block_slices(), spec_to.formulas)):
        out[sl.start] = src.get((k, None), 0.0)
        for i, c in enumerate(cols):
            out[sl.start + 1 + i] = src.get((k, c), 0.0)
    if spec_to.h0_free and spec_from.h0_free:
        out[-1] = eta_from[-1]
    return out


class _Scorer:
    def __init__(self, data, base_spec, priors, cache, fit_options):
        self.data = data
        self.base = base_spec
        self.priors = priors
        self.cache = cache
        self.fit_options = fit_options

    def spec_for(self, mask: InclusionMask) -> ModelSpec:
        return self.base.with_formulas(mask.formulas())

    def score(self, mask: InclusionMask, warm_from: Optional[InclusionMask] = None) -> CachedModel:
        hit = self.cache.get(mask.key)
        if hit is not None:
            return hit
        spec = self.spec_for(mask)
        init = np.zeros(spec.n_params)
        if warm_from is not None:
            prev = self.cache.get(warm_from.key)
            if prev is not None and prev.eta is not None:
                init = _warm_start(self.spec_for(warm_from), prev.eta, spec)
        try:
            fit: FitResult = find_map(LogPosterior(self.data, spec, self.priors), init,
                                      **self.fit_options)
            if fit.log_evidence is None:
                raise HessianError("Hessian not positive definite at the mode")
            value = CachedModel(fit.log_evidence, fit.eta, fit.log_post, fit.converged)
        except (OptimizationError, HessianError, CollinearityError) as exc:
            log.warning("evidence failed for mask %s: %s", mask.key, exc)
            value = CachedModel(-np.inf, None)
        return self.cache.put(mask.key, value)


def gibbs_select(data: SurvivalDataset, spec: ModelSpec, priors: PriorSpec,
                 init_mask: Optional[InclusionMask] = None, n_iter: int = 100,
                 burn_in: int = 10, seed: int = 0, candidates=None,
                 cache: Optional[ModelCache] = None, fit_options: Optional[dict] = None
                 ) -> SelectionResult:
    """Gibbs sampler over inclusion masks.

    ``spec`` supplies the family, links and initial conditions; its formulas
    are replaced by each mask's. ``candidates`` is a ``d x p`` 0/1 matrix of
    pairs eligible for selection (all pairs by default); the complexity
    prior uses their count as ``d``. One iteration is a full sweep in
    parameter-major, covariate-minor order. Masks after ``burn_in``
    iterations are recorded.
    """
    if not n_iter > burn_in >= 0:
        raise ValueError("need n_iter > burn_in >= 0")
    d, p = len(spec.param_names), data.p
    cand = np.ones((d, p), dtype=int) if candidates is None else np.asarray(candidates, dtype=int)
    if cand.shape != (d, p):
        raise ValueError(f"candidates must be {d} x {p}")
    pairs = [(k, j) for k in range(d) for j in range(p) if cand[k, j]]
    d_tilde = max(len(pairs), 1)
    mask = init_mask if init_mask is not None else InclusionMask.empty(d, p)
    if mask.shape != (d, p):
        raise ValueError(f"initial mask must be {d} x {p}")
    cache = cache if cache is not None else ModelCache()
    opts = {"n_starts": 1}
    opts.update(fit_options or {})
    scorer = _Scorer(data, spec, priors, cache, opts)
    C = priors.complexity_C
    rng = np.random.default_rng(seed)

    current = scorer.score(mask)
    visits: Counter = Counter()
    trace = []
    incl = np.zeros((d, p))
    for it in range(n_iter):
        for k, j in pairs:
            proposal = mask.flipped(k, j)
            new = scorer.score(proposal, warm_from=mask)
            if new.log_evidence == -np.inf and current.log_evidence == -np.inf:
                continue
            prob = flip_probability(
                new.log_evidence, log_complexity_prior(proposal.n_active, C, d_tilde),
                current.log_evidence, log_complexity_prior(mask.n_active, C, d_tilde))
            if rng.random() < prob:
                mask, current = proposal, new
        trace.append(mask.key)
        if it >= burn_in:
            visits[mask.key] += 1
            incl += mask.array
    incl /= n_iter - burn_in
    return SelectionResult(visits, cache, incl, trace, d_tilde, C)
