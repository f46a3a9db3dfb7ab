"""Posterior comparison metrics, Kaplan-Meier curves and predictive summaries."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate, stats

from . import ode_engine
from .hazard_models import (
    HazardResponseParams,
    ModelSpec,
    classify_attractor,
    family_rhs,
    initial_states,
    logistic_cumhaz,
    logistic_hazard,
    predictor_values,
)
from .likelihood import SurvivalDataset, run_chunks

BAND = (2.5, 97.5)
MAX_FAILED_FRACTION = 0.01


# -- total variation --------------------------------------------------------

def silverman_bandwidth(x) -> float:
    """``0.9 min(sd, IQR/1.34) n^{-1/5}``."""
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * x.shape[0] ** -0.2


def _kde(x, bandwidth) -> tuple:
    h = silverman_bandwidth(x) if bandwidth is None else (
        float(bandwidth(x)) if callable(bandwidth) else float(bandwidth))
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    sd = float(np.std(x, ddof=1))
    return stats.gaussian_kde(x, bw_method=h / sd), h


def tv_distance(sample_a, sample_b, bandwidth=None) -> float:
    """Total variation distance between Gaussian KDEs of two 1-D samples.

    ``bandwidth`` is ``None`` (Silverman's rule per sample), a number, or a
    callable mapping a sample to its bandwidth. The integral of
    ``|f_a - f_b| / 2`` is computed by adaptive quadrature over both
    supports extended by five bandwidths.
    """
    a = np.asarray(sample_a, dtype=float).reshape(-1)
    b = np.asarray(sample_b, dtype=float).reshape(-1)
    if a.shape[0] < 30 or b.shape[0] < 30:
        raise ValueError("each sample needs at least 30 draws")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("zero-variance sample")
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    fa, ha = _kde(a, bandwidth)
    fb, hb = _kde(b, bandwidth)
    segments = []
    for x, h in ((a, ha), (b, hb)):
        segments.append((x.min() - 5 * h, x.max() + 5 * h))
    lo = min(s[0] for s in segments)
    hi = max(s[1] for s in segments)
    # breakpoints keep the quadrature from stepping over narrow peaks
    pts = np.unique(np.concatenate([np.quantile(a, np.linspace(0, 1, 41)),
                                    np.quantile(b, np.linspace(0, 1, 41)),
                                    [s for seg in segments for s in seg]]))
    pts = pts[(pts > lo) & (pts < hi)]
    total = 0.0
    edges = np.concatenate([[lo], pts, [hi]])
    for x0, x1 in zip(edges[:-1], edges[1:]):
        v, _ = integrate.quad(lambda t: abs(fa(t)[0] - fb(t)[0]), x0, x1, limit=200)
        total += v
    return float(min(max(0.5 * total, 0.0), 1.0))


# -- hazard distance --------------------------------------------------------

def l1_hazard_distance(h_a: Callable, h_b: Callable, t_star: float,
                       quad_step: Optional[float] = None) -> float:
    """Trapezoid approximation of ``int_0^t_star |h_a - h_b| dt``.

    Both hazards must accept an array of times.
    """
    if not t_star > 0:
        raise ValueError("t_star must be positive")
    step = 1e-3 * t_star if quad_step is None else float(quad_step)
    m = max(int(np.ceil(t_star / step - 1e-9)), 1)
    t = np.linspace(0.0, t_star, m + 1)
    diff = np.abs(np.asarray(h_a(t), dtype=float) - np.asarray(h_b(t), dtype=float))
    return float(np.trapezoid(diff, t)) if hasattr(np, "trapezoid") else float(np.trapz(diff, t))


# -- Kaplan-Meier -----------------------------------------------------------

@dataclass(frozen=True)
class KMCurve:
    """Right-continuous product-limit estimate; ``survival[i]`` holds on ``[times[i], times[i+1])``."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        if self.times.size == 0:
            s = np.ones_like(t)
        else:
            s = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        return s if s.ndim else float(s)


def _km(times: np.ndarray, status: np.ndarray) -> KMCurve:
    order = np.lexsort((1 - status, times))
    t, d = times[order], status[order]
    uniq = np.unique(t[d == 1])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=float)
    events = np.array([((t == u) & (d == 1)).sum() for u in uniq], dtype=float)
    surv = np.cumprod(1.0 - events / at_risk) if uniq.size else np.zeros(0)
    return KMCurve(uniq, surv, at_risk, events)


def kaplan_meier(data: Union[SurvivalDataset, tuple], group=None):
    """Product-limit survival estimate.

    ``data`` is a dataset or ``(times, status)``. With ``group`` (column
    name or index) a dict mapping each distinct value to its curve is
    returned. At tied times events are counted before censorings, so
    individuals censored at an event time are still at risk.
    """
    if isinstance(data, SurvivalDataset):
        times, status = data.times, data.status
    else:
        times, status = (np.asarray(a) for a in data)
    times = np.asarray(times, dtype=float)
    status = np.asarray(status, dtype=np.int64)
    if group is None:
        return _km(times, status)
    if not isinstance(data, SurvivalDataset):
        raise ValueError("grouping needs a SurvivalDataset")
    j = data.column_index(group) if isinstance(group, str) else int(group)
    col = data.covariates[:, j]
    return {float(v): _km(times[col == v], status[col == v]) for v in np.unique(col)}


# -- predictive curves ------------------------------------------------------

@dataclass
class PredictiveCurves:
    """Pointwise mean and central 95% band per quantity over a time grid."""

    time: np.ndarray
    summaries: dict
    attractor_probs: dict = field(default_factory=dict)
    n_draws: int = 0
    n_failed: int = 0

    def rows(self):
        """Long-format rows ``(time, mean, lo95, hi95, quantity)``."""
        for quantity, s in self.summaries.items():
            for i, t in enumerate(self.time):
                yield float(t), float(s["mean"][i]), float(s["lo95"][i]), float(s["hi95"][i]), quantity


def _summarise(values: np.ndarray) -> dict:
    lo, hi = np.percentile(values, BAND, axis=0, method="linear")
    # shifting by the first draw keeps a point-mass posterior exact
    mean = values[0] + (values - values[0]).mean(axis=0)
    return {"mean": mean, "lo95": lo, "hi95": hi}


def predictive_curves(spec: ModelSpec, draws, x_profile, time_grid, n_threads=None) -> PredictiveCurves:
    """Hazard, survival and (hazard-response) response curves over posterior draws.

    ``draws`` is a :class:`~survode.inference.PosteriorSample` or an
    ``N x d`` array. Draws whose solve fails are dropped and counted; more
    than 1% failures raise ``RuntimeError``.
    """
    draws = np.atleast_2d(getattr(draws, "draws", draws)).astype(float)
    grid = np.asarray(time_grid, dtype=float).reshape(-1)
    if grid.size == 0 or grid[0] < 0 or np.any(np.diff(grid) < 0):
        raise ValueError("time grid must be non-empty, sorted and non-negative")
    if grid[-1] > spec.max_time:
        raise ValueError("time grid extends beyond the model's max_time")
    x = np.asarray(x_profile, dtype=float).reshape(1, -1)
    N = draws.shape[0]
    theta = np.empty((N, len(spec.param_names)))
    y0 = np.empty((N, spec.state_dim))
    for i, eta in enumerate(draws):
        theta[i] = predictor_values(spec, eta, x)[0][0]
        y0[i] = initial_states(spec, eta, theta[i:i + 1])[0]

    if spec.family == "logistic":
        with np.errstate(over="ignore", invalid="ignore"):
            h = logistic_hazard(grid[None, :], theta[:, :1], theta[:, 1:2], y0[:, :1])
            H = logistic_cumhaz(grid[None, :], theta[:, :1], theta[:, 1:2], y0[:, :1])
        ok = np.isfinite(h).all(axis=1) & np.isfinite(H).all(axis=1)
        q = None
    else:
        out = np.empty((N, grid.shape[0], spec.state_dim))
        status = np.zeros(N, dtype=np.int64)
        rhs = family_rhs(spec.family)
        g = grid if grid[0] == 0 else np.concatenate([[0.0], grid])
        buf = out if grid[0] == 0 else np.empty((N, g.shape[0], spec.state_dim))

        def work(a, b):
            ode_engine.solve_batch_grid(rhs, theta[a:b], y0[a:b], g, ode_engine.DEFAULT_RTOL,
                                        ode_engine.DEFAULT_ATOL, ode_engine.DEFAULT_MAX_STEPS,
                                        buf[a:b], status[a:b])

        run_chunks(work, N, n_threads)
        if buf is not out:
            out[:] = buf[:, 1:]
        ok = (status == ode_engine.OK) & np.isfinite(out).all(axis=(1, 2))
        h, q, H = out[:, :, 0], out[:, :, 1], out[:, :, -1]

    n_failed = int((~ok).sum())
    if n_failed > MAX_FAILED_FRACTION * N:
        raise RuntimeError(f"{n_failed} of {N} posterior draws failed to solve")
    summaries = {"hazard": _summarise(h[ok]), "survival": _summarise(np.exp(-H[ok]))}
    if q is not None:
        summaries["response"] = _summarise(q[ok])
    probs = {}
    if spec.family == "hazard_response":
        kinds = []
        for i in np.flatnonzero(ok):
            a = classify_attractor(HazardResponseParams(*theta[i], h0=y0[i, 0], q0=y0[i, 1]))
            kinds.append((a.h_star, a.q_star))
        hs, qs = np.array(kinds).T
        probs = {"h_star_negative": float(np.mean(hs < 0)),
                 "q_star_negative": float(np.mean(qs < 0)),
                 "both_positive": float(np.mean((hs > 0) & (qs > 0)))}
    return PredictiveCurves(grid, summaries, probs, N, n_failed)
