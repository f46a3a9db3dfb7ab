"""MAP estimation, finite-difference Hessians, Laplace evidence and sampling.

Every routine takes a *target*: any callable mapping a parameter vector to a
log posterior value (``-inf`` outside the support). :class:`LogPosterior`
from :mod:`survode.likelihood` is the usual one; toy densities work equally
well. A target may also expose ``log_likelihood(eta)``, ``n_obs`` and
``names``, which are used for information criteria and labelling when
present.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps
FD_STEP = _EPS ** (1.0 / 3.0)
# second differences divide rounding error by h^2, so their optimal step is larger
HESS_STEP = _EPS ** 0.25
GRAD_TOL = 1e-5
# finite stand-in for -inf handed to the optimisers
_PENALTY = 1e100
_LOG_2PI = math.log(2.0 * math.pi)
QUANTILE_METHOD = "linear"


class OptimizationError(RuntimeError):
    """No start produced a finite log posterior."""


class HessianError(RuntimeError):
    """A finite-difference stencil left the support, or the matrix is unusable."""


class SamplerError(RuntimeError):
    """The sampler made no progress."""


@dataclass
class FitResult:
    """Posterior mode and the quadratic approximation around it.

    ``hessian`` is the Hessian of the *negated* log posterior, so it is
    positive definite at a proper maximum.
    """

    eta: np.ndarray
    log_post: float
    log_lik: float
    hessian: Optional[np.ndarray] = None
    log_evidence: Optional[float] = None
    aic: Optional[float] = None
    bic: Optional[float] = None
    converged: bool = False
    positive_definite: bool = False
    n_iter: int = 0
    grad_norm: float = np.nan
    n_evals: int = 0
    names: tuple = ()

    @property
    def dim(self) -> int:
        return self.eta.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        if not self.positive_definite:
            raise HessianError("Hessian is not positive definite at the mode")
        return np.linalg.inv(self.hessian)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def summary(self) -> dict:
        return {
            "names": list(self.names),
            "map": self.eta.tolist(),
            "log_posterior": self.log_post,
            "log_likelihood": self.log_lik,
            "log_evidence": self.log_evidence,
            "aic": self.aic,
            "bic": self.bic,
            "converged": self.converged,
            "positive_definite": self.positive_definite,
            "iterations": self.n_iter,
            "gradient_norm": self.grad_norm,
            "hessian": None if self.hessian is None else self.hessian.tolist(),
        }


@dataclass
class PosteriorSample:
    draws: np.ndarray
    source: str
    seed: int
    acceptance_rate: Optional[float] = None
    thin: Optional[int] = None
    burn_in: Optional[int] = None
    names: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[0] == 0:
            raise ValueError("a posterior sample needs at least one draw")
        if not np.isfinite(self.draws).all():
            raise ValueError("posterior draws must be finite")
        if self.source not in ("mcmc", "normal_approx", "point_mass"):
            raise ValueError(f"unknown sample source {self.source!r}")

    @property
    def n(self) -> int:
        return self.draws.shape[0]


# -- helpers ----------------------------------------------------------------

class _Counted:
    """Wraps a target, counting calls and mapping NaN to -inf."""

    def __init__(self, target: Callable):
        self.target = target
        self.calls = 0

    def __call__(self, x) -> float:
        self.calls += 1
        v = float(self.target(np.asarray(x, dtype=float)))
        return -np.inf if math.isnan(v) else v

    def neg(self, x) -> float:
        v = self(x)
        return -v if np.isfinite(v) else _PENALTY


def _steps(x: np.ndarray, rel_step: float) -> np.ndarray:
    h = rel_step * np.maximum(1.0, np.abs(x))
    # make x + h exactly representable
    return (x + h) - x


def gradient(target: Callable, eta, rel_step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of ``target`` at ``eta``."""
    x = np.asarray(eta, dtype=float)
    h = _steps(x, rel_step)
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h[i]
        fp, fm = target(x + e), target(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return np.full_like(x, np.nan)
        g[i] = (fp - fm) / (2.0 * h[i])
    return g


def _scaled_grad_norm(g: np.ndarray, x: np.ndarray, f: float) -> float:
    return float(np.max(np.abs(g) * np.maximum(1.0, np.abs(x))) / max(1.0, abs(f))) if g.size else 0.0


def hessian_at(target: Callable, eta, rel_step: float = HESS_STEP) -> np.ndarray:
    """Hessian of ``-target`` at ``eta`` by central differences.

    Step for coordinate i is ``rel_step * max(1, |eta_i|)``; the result is
    symmetrised.

    Raises
    ------
    HessianError
        If any stencil point has a non-finite log posterior.
    """
    x = np.asarray(eta, dtype=float).reshape(-1)
    d = x.shape[0]
    h = _steps(x, rel_step)
    f0 = float(target(x))
    if not np.isfinite(f0):
        raise HessianError("log posterior is not finite at the evaluation point")

    def f(*shifts):
        y = x.copy()
        for i, s in shifts:
            y[i] += s * h[i]
        v = float(target(y))
        if not np.isfinite(v):
            raise HessianError(
                "finite-difference stencil left the support; the point is close to a "
                "boundary, retry with a smaller rel_step")
        return v

    M = np.empty((d, d))
    for i in range(d):
        M[i, i] = -(f((i, 1)) - 2.0 * f0 + f((i, -1))) / h[i] ** 2
        for j in range(i):
            v = (f((i, 1), (j, 1)) - f((i, 1), (j, -1))
                 - f((i, -1), (j, 1)) + f((i, -1), (j, -1))) / (4.0 * h[i] * h[j])
            M[i, j] = M[j, i] = -v
    return 0.5 * (M + M.T)


def _is_positive_definite(H: np.ndarray) -> bool:
    if H.size == 0:
        return True
    try:
        np.linalg.cholesky(H)
        return True
    except np.linalg.LinAlgError:
        return False


# -- optimisation -----------------------------------------------------------

def _optimise_from(fn: _Counted, x0: np.ndarray, nm_iter: int, max_iter: int,
                   tol: float, rel_step: float):
    d = x0.shape[0]
    res = optimize.minimize(
        fn.neg, x0, method="Nelder-Mead",
        options={"maxiter": nm_iter, "xatol": 1e-6, "fatol": 1e-8, "adaptive": d > 2},
    )
    x = res.x if res.fun < fn.neg(x0) else x0
    f = -fn.neg(x)
    n_iter = int(res.nit)

    def jac(y):
        g = gradient(fn, y, rel_step)
        return -np.where(np.isfinite(g), g, 0.0)

    # BFGS tests the plain max-norm; tighten it so the scaled norm passes too
    gtol = tol * (max(1.0, abs(f)) if np.isfinite(f) else 1.0) / (2.0 * max(1.0, float(np.max(np.abs(x)))))
    res = optimize.minimize(fn.neg, x, jac=jac, method="BFGS",
                            options={"maxiter": max_iter, "gtol": gtol})
    if res.fun <= fn.neg(x):
        x = res.x
    n_iter += int(res.nit)
    return x, -fn.neg(x), n_iter


def find_map(target: Callable, init, *, n_starts: int = 3, jitter: float = 0.1,
             jitter_seed: int = 0, nm_iter: Optional[int] = None, max_iter: int = 500,
             tol: float = GRAD_TOL, rel_step: float = FD_STEP,
             hess_step: float = HESS_STEP, compute_hessian: bool = True) -> FitResult:
    """Maximise ``target`` from ``init`` and from jittered copies of it.

    Each start runs a Nelder-Mead warm start followed by BFGS on
    central-difference gradients; the best end point is kept. The jitter uses
    its own fixed seed, so the result depends only on ``init``.

    ``converged`` requires the scaled gradient norm
    ``max_i |g_i| max(1, |eta_i|) / max(1, |f|)`` below ``tol`` and a
    positive-definite Hessian.
    """
    x0 = np.asarray(init, dtype=float).reshape(-1)
    if not np.isfinite(x0).all():
        raise ValueError("initial value must be finite")
    d = x0.shape[0]
    fn = _Counted(target)
    names = tuple(getattr(target, "names", ()) or ())

    if d == 0:
        f = fn(x0)
        if not np.isfinite(f):
            raise OptimizationError("log posterior is -inf for the fixed model")
        fit = FitResult(x0, f, _loglik(target, x0, f), np.zeros((0, 0)), converged=True,
                        positive_definite=True, grad_norm=0.0, n_evals=fn.calls, names=names)
        _attach_criteria(fit, target)
        fit.log_evidence = laplace_log_evidence(fit)
        return fit

    nm_iter = nm_iter if nm_iter is not None else 200 * d
    rng = np.random.default_rng(jitter_seed)
    starts = [x0] + [x0 + rng.normal(0.0, jitter, d) for _ in range(max(n_starts, 1) - 1)]
    best = None
    total_iter = 0
    for s in starts:
        if not np.isfinite(fn(s)):
            continue
        x, f, it = _optimise_from(fn, s, nm_iter, max_iter, tol, rel_step)
        total_iter += it
        if np.isfinite(f) and (best is None or f > best[1]):
            best = (x, f)
    if best is None:
        raise OptimizationError("every start lies where the log posterior is -inf")
    x, f = best
    g = gradient(fn, x, rel_step)
    gnorm = _scaled_grad_norm(g, x, f) if np.isfinite(g).all() else np.inf
    fit = FitResult(x, f, _loglik(target, x, f), n_iter=total_iter, grad_norm=gnorm, names=names)
    if compute_hessian:
        try:
            fit.hessian = hessian_at(fn, x, hess_step)
            fit.positive_definite = _is_positive_definite(fit.hessian)
        except HessianError as exc:
            log.warning("Hessian at the mode failed: %s", exc)
    fit.converged = bool(gnorm < tol and fit.positive_definite)
    fit.n_evals = fn.calls
    _attach_criteria(fit, target)
    if fit.positive_definite:
        fit.log_evidence = laplace_log_evidence(fit)
    return fit


def _loglik(target, x, fallback: float) -> float:
    ll = getattr(target, "log_likelihood", None)
    return float(ll(x)) if callable(ll) else float(fallback)


def _attach_criteria(fit: FitResult, target) -> None:
    n = getattr(target, "n_obs", None)
    if n is None:
        data = getattr(target, "data", None)
        n = getattr(data, "n", None)
    if n:
        fit.aic, fit.bic = information_criteria(fit.log_lik, fit.dim, int(n))


def laplace_log_evidence(fit: FitResult) -> float:
    """``log_post + (d/2) log 2 pi - (1/2) log det H`` at the mode."""
    d = fit.dim
    if d == 0:
        return float(fit.log_post)
    if fit.hessian is None:
        raise HessianError("fit has no Hessian")
    try:
        L = np.linalg.cholesky(fit.hessian)
    except np.linalg.LinAlgError:
        raise HessianError("Hessian is not positive definite: model unidentifiable at the mode") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return float(fit.log_post + 0.5 * d * _LOG_2PI - 0.5 * logdet)


def information_criteria(log_lik: float, k: int, n: int) -> tuple:
    """``(AIC, BIC)`` for ``k`` free parameters and ``n`` observations."""
    if k < 0 or n < 1:
        raise ValueError("need k >= 0 and n >= 1")
    return -2.0 * log_lik + 2.0 * k, -2.0 * log_lik + k * math.log(n)


# -- sampling ---------------------------------------------------------------

def sample_normal_approx(fit: FitResult, n_draws: int, seed: int) -> PosteriorSample:
    """Independent draws from ``N(MAP, H^{-1})``."""
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    if fit.hessian is None:
        raise HessianError("fit has no Hessian")
    try:
        L = np.linalg.cholesky(fit.hessian)
    except np.linalg.LinAlgError:
        raise HessianError("Hessian is not positive definite") from None
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, fit.dim))
    # H = L L^T, so x = MAP + L^{-T} z has covariance H^{-1}
    draws = fit.eta + solve_triangular(L, z.T, lower=True, trans="T").T
    return PosteriorSample(draws, "normal_approx", seed, names=fit.names)


def adaptive_metropolis(target: Callable, init, n_iter: int, burn_in: int, thin: int,
                        seed: int, init_cov=None, target_accept: float = 0.234,
                        adapt_exponent: float = 0.6) -> PosteriorSample:
    """Random-walk Metropolis with covariance and scale adaptation.

    The proposal is ``N(x, s^2 S)``. ``S`` starts at ``init_cov`` (identity
    when omitted) and is updated from the chain with weight ``1/(i+2)``;
    ``log s`` follows a Robbins-Monro recursion toward ``target_accept``
    with gain ``(i+1)^-adapt_exponent``. Both freeze at the end of burn-in.
    ``n_iter`` counts all iterations, burn-in included; every ``thin``-th
    state after burn-in is kept.
    """
    if not (0 <= burn_in < n_iter) or thin < 1:
        raise ValueError("need 0 <= burn_in < n_iter and thin >= 1")
    x = np.asarray(init, dtype=float).reshape(-1).copy()
    d = x.shape[0]
    fx = float(target(x))
    if not np.isfinite(fx):
        raise ValueError("log posterior is not finite at the initial value")
    S = np.eye(d) if init_cov is None else np.array(init_cov, dtype=float).reshape(d, d)
    mean = x.copy()
    log_s = math.log(2.38 / math.sqrt(d))
    jitter = 1e-10 * np.eye(d)
    L = np.linalg.cholesky(S + jitter)
    rng = np.random.default_rng(seed)
    keep = []
    accepted_after = 0
    for i in range(n_iter):
        y = x + math.exp(log_s) * (L @ rng.standard_normal(d))
        fy = float(target(y))
        log_a = fy - fx if np.isfinite(fy) else -np.inf
        a = 1.0 if log_a >= 0 else math.exp(log_a)
        if rng.random() < a:
            x, fx = y, fy
            if i >= burn_in:
                accepted_after += 1
        if i < burn_in:
            w = 1.0 / (i + 2)
            dx = x - mean
            mean = mean + w * dx
            S = S + w * (np.outer(dx, x - mean) - S)
            log_s += (a - target_accept) / (i + 1) ** adapt_exponent
            try:
                L = np.linalg.cholesky(S + jitter)
            except np.linalg.LinAlgError:
                pass
        elif (i - burn_in + 1) % thin == 0:
            keep.append(x.copy())
    n_after = n_iter - burn_in
    if accepted_after == 0:
        raise SamplerError("no proposal was accepted after burn-in; the proposal scale has collapsed")
    return PosteriorSample(np.array(keep), "mcmc", seed, accepted_after / n_after, thin, burn_in,
                           names=tuple(getattr(target, "names", ()) or ()),
                           metadata={"final_scale": math.exp(log_s)})


def credible_intervals(sample, level: float = 0.95) -> np.ndarray:
    """Equal-tailed intervals per coordinate, shape ``(d, 2)``.

    Quantiles use linear interpolation between order statistics.
    """
    draws = sample.draws if isinstance(sample, PosteriorSample) else np.asarray(sample, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    a = (1.0 - level) / 2.0
    q = np.quantile(draws, [a, 1.0 - a], axis=0, method=QUANTILE_METHOD)
    return q.T.copy()
