"""Survival times from ODE hazard models by inverting the cumulative hazard.

Each individual's system is solved on a regular grid over ``[0, t_max]``;
``H`` on that grid is inverted by linear interpolation at ``-log u`` with
``u ~ Uniform(0, 1)``. Draws beyond ``H(t_max)`` come back as ``t_max`` and
are flagged, so censoring at a horizon ``C <= t_max`` marks them censored.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ode_engine
from .hazard_models import (
    ModelSpec,
    as_eta,
    family_rhs,
    initial_hazard,
    initial_states,
    logistic_cumhaz,
    predictor_values,
)
from .likelihood import SurvivalDataset, run_chunks

DEFAULT_GRID_STEP = 0.01
# rows per block when building H on the grid; bounds memory for fine grids
SIM_BLOCK = 1024
MONOTONE_SLACK = 1e-12
# dense output on a plateau of H wobbles at the solver's relative tolerance
_SOLVER_SLACK = ode_engine.DEFAULT_RTOL

SCENARIO_TRUTH = np.array([1.5, 0.5, 0.5, -0.5, 1.0, 0.5, 3.0, -0.5])
SCENARIO_COLUMNS = ("x1", "x2", "x3", "x4")


class SimulationError(RuntimeError):
    pass


def time_grid(t_max: float, grid_step: float) -> np.ndarray:
    if not (grid_step > 0 and t_max > 0):
        raise ValueError("grid_step and t_max must be positive")
    m = int(np.ceil(t_max / grid_step - 1e-9))
    grid = np.arange(m + 1) * grid_step
    grid[-1] = t_max
    return grid


def _invert_on_grid(grid: np.ndarray, H: np.ndarray, target: float):
    if target <= 0.0:
        return 0.0, False
    if target > H[-1]:
        return float(grid[-1]), True
    k = int(np.searchsorted(H, target, side="left"))
    if k == 0:
        return float(grid[0]), False
    h0, h1 = H[k - 1], H[k]
    w = (target - h0) / (h1 - h0) if h1 > h0 else 1.0
    return float(grid[k - 1] + w * (grid[k] - grid[k - 1])), False


def _check_monotone(H: np.ndarray, row=None, solver_slack: float = 0.0) -> np.ndarray:
    """Validate a cumulative-hazard sequence and return its running maximum."""
    slack = MONOTONE_SLACK + solver_slack * float(np.max(np.abs(H), initial=0.0))
    if np.any(np.diff(H) < -slack):
        where = "" if row is None else f" for row {row}"
        raise SimulationError(f"cumulative hazard is not non-decreasing on the grid{where}")
    return np.maximum.accumulate(H)


def invert_cumhaz(H, target: float, grid_step: float = DEFAULT_GRID_STEP,
                  t_max: Optional[float] = None):
    """Solve ``H(t) = target`` by linear interpolation on a grid.

    ``H`` is a :class:`~survode.ode_engine.Trajectory` (last state is the
    cumulative hazard), a vectorised callable ``H(t)`` together with
    ``t_max``, or a pair ``(grid, values)``. Returns ``(t, beyond)`` where
    ``beyond`` is set when ``target`` exceeds ``H(t_max)`` and ``t`` is then
    ``t_max``.
    """
    if not target >= 0:
        raise ValueError("target must be non-negative")
    if isinstance(H, ode_engine.Trajectory):
        grid = time_grid(H.t_end, grid_step) if H.t_end > 0 else np.zeros(1)
        values = np.array([H.evaluate_at(t)[-1] for t in grid])
    elif isinstance(H, tuple):
        grid, values = (np.asarray(a, dtype=float) for a in H)
    elif callable(H):
        if t_max is None:
            raise ValueError("t_max is required with a callable cumulative hazard")
        grid = time_grid(t_max, grid_step)
        values = np.asarray(H(grid), dtype=float)
    else:
        raise TypeError("H must be a Trajectory, a callable or a (grid, values) pair")
    values = _check_monotone(values, solver_slack=_SOLVER_SLACK if isinstance(H, ode_engine.Trajectory) else 0.0)
    return _invert_on_grid(grid, values, float(target))


def row_uniforms(seed: int, n: int) -> np.ndarray:
    """One uniform per row from a substream keyed by ``(seed, row)``."""
    ss = np.random.SeedSequence(seed)
    return np.array([np.random.default_rng(c).random() for c in ss.spawn(n)])


def cumhaz_grid(spec: ModelSpec, eta, X, grid: np.ndarray, n_threads=None) -> np.ndarray:
    """``H`` on ``grid`` for every row of ``X`` (n x len(grid))."""
    eta = as_eta(spec, eta)
    X = np.asarray(X, dtype=float)
    theta, _ = predictor_values(spec, eta, X)
    n = X.shape[0]
    if spec.family == "logistic":
        h0 = initial_hazard(spec, eta, theta)
        h0 = np.broadcast_to(h0, (n,))
        return logistic_cumhaz(grid[None, :], theta[:, :1], theta[:, 1:2], h0[:, None])
    y0 = initial_states(spec, eta, theta)
    out = np.empty((n, grid.shape[0], spec.state_dim))
    status = np.zeros(n, dtype=np.int64)
    rhs = family_rhs(spec.family)

    def work(a, b):
        ode_engine.solve_batch_grid(rhs, theta[a:b], y0[a:b], grid, ode_engine.DEFAULT_RTOL,
                                    ode_engine.DEFAULT_ATOL, ode_engine.DEFAULT_MAX_STEPS,
                                    out[a:b], status[a:b])

    run_chunks(work, n, n_threads)
    bad = np.flatnonzero(status != ode_engine.OK)
    if bad.size:
        raise SimulationError(f"ODE solve failed for row {int(bad[0])} "
                              f"({ode_engine._STATUS_TEXT.get(int(status[bad[0]]), 'failure')})")
    return out[:, :, -1]


def _offset_row(message: str, offset: int) -> str:
    head, sep, rest = message.partition("for row ")
    if not sep:
        return message
    num, _, tail = rest.partition(" ")
    return f"{head}for row {int(num) + offset} {tail}".rstrip()


@dataclass
class SimulatedTimes:
    times: np.ndarray
    beyond: np.ndarray
    uniforms: np.ndarray


def simulate_times(spec: ModelSpec, eta_true, covariates, t_max: float,
                   grid_step: float = DEFAULT_GRID_STEP, seed: int = 0,
                   uniforms=None, n_threads=None) -> SimulatedTimes:
    """Event times ``H^{-1}(-log u)``, one per covariate row.

    ``uniforms`` overrides the random draws (used in tests).
    """
    X = np.atleast_2d(np.asarray(covariates, dtype=float))
    n = X.shape[0]
    grid = time_grid(t_max, grid_step)
    u = row_uniforms(seed, n) if uniforms is None else np.asarray(uniforms, dtype=float).reshape(n)
    if np.any((u <= 0) | (u > 1)):
        raise ValueError("uniforms must lie in (0, 1]")
    times = np.empty(n)
    beyond = np.zeros(n, dtype=bool)
    targets = -np.log(u)
    for a in range(0, n, SIM_BLOCK):
        b = min(a + SIM_BLOCK, n)
        try:
            H = cumhaz_grid(spec, eta_true, X[a:b], grid, n_threads)
        except SimulationError as exc:
            raise SimulationError(_offset_row(str(exc), a)) from None
        for i in range(a, b):
            Hi = _check_monotone(H[i - a], i, _SOLVER_SLACK)
            times[i], beyond[i] = _invert_on_grid(grid, Hi, targets[i])
    return SimulatedTimes(times, beyond, u)


def apply_censoring(times, C: float, beyond=None):
    """Administrative censoring: ``(min(t, C), 1{t <= C})``.

    Rows flagged in ``beyond`` (event not reached by the simulation horizon)
    are censored regardless.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    times = np.asarray(times, dtype=float)
    status = (times <= C).astype(np.int64)
    if beyond is not None:
        status[np.asarray(beyond, dtype=bool)] = 0
    return np.minimum(times, C), status


def scenario_spec() -> ModelSpec:
    """Hazard-response model with one covariate per ODE parameter."""
    return ModelSpec("hazard_response", ((0,), (1,), (2,), (3,)))


def scenario_covariates(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return np.column_stack([
        rng.binomial(1, 0.5, n), rng.binomial(1, 0.5, n),
        rng.standard_normal(n), rng.standard_normal(n),
    ]).astype(float)


def calibrate_horizon(target_rate: float, t_max: float = 10.0, n_pilot: int = 20_000,
                      seed: int = 12345, grid_step: float = DEFAULT_GRID_STEP,
                      truth=SCENARIO_TRUTH) -> float:
    """Horizon C whose expected censoring rate under the scenario is ``target_rate``.

    Uses a pilot sample: C is the ``1 - target_rate`` quantile of the
    simulated event times, capped at ``t_max``. Results are memoised.
    """
    return _calibrate(float(target_rate), float(t_max), int(n_pilot), int(seed),
                      float(grid_step), tuple(float(v) for v in truth))


@functools.lru_cache(maxsize=32)
def _calibrate(target_rate, t_max, n_pilot, seed, grid_step, truth) -> float:
    if not 0 < target_rate < 1:
        raise ValueError("target_rate must lie in (0, 1)")
    X = scenario_covariates(n_pilot, seed)
    sim = simulate_times(scenario_spec(), truth, X, t_max, grid_step, seed)
    t = np.where(sim.beyond, np.inf, sim.times)
    C = float(np.quantile(t, 1.0 - target_rate))
    return min(C, t_max)


def generate_scenario(n: int, censoring_C: Optional[float] = None, seed: int = 0,
                      target_censoring: float = 0.2, grid_step: float = DEFAULT_GRID_STEP,
                      truth=SCENARIO_TRUTH, n_threads=None) -> SurvivalDataset:
    """Hazard-response simulation design with four covariates.

    Covariates are two Bernoulli(0.5) and two standard normal columns. When
    ``censoring_C`` is omitted the horizon is calibrated to
    ``target_censoring``. The horizon, seed and realised censoring rate are
    stored in the dataset metadata.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    C = calibrate_horizon(target_censoring, grid_step=grid_step, truth=truth) \
        if censoring_C is None else float(censoring_C)
    X = scenario_covariates(n, seed)
    sim = simulate_times(scenario_spec(), truth, X, C, grid_step, seed, n_threads=n_threads)
    t, status = apply_censoring(sim.times, C, sim.beyond)
    # an event exactly at 0 carries no information and is not a valid time
    t = np.maximum(t, grid_step * 1e-6)
    meta = {"seed": int(seed), "horizon": C, "grid_step": grid_step,
            "target_censoring": None if censoring_C is not None else target_censoring,
            "censoring_rate": float(1.0 - status.mean())}
    return SurvivalDataset(t, status, X, SCENARIO_COLUMNS, max_time=C, metadata=meta)
