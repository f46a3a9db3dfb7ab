"""Adaptive Dormand-Prince 5(4) integration of small autonomous ODE systems.

The stepping kernel is written once in numba-compatible Python and compiled
separately for each built-in hazard system (see :mod:`survode.systems`). Any
other right-hand side runs through the same code as plain Python, which is
slow but fine for one-off systems and tests.

Right-hand sides have the signature ``rhs(y, params, out)``, write the
derivative into ``out`` and must not depend on time.
"""
from __future__ import annotations

import types
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable

import numpy as np
from numba import njit

from . import systems

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
DEFAULT_MAX_STEPS = 100_000
MIN_STEP_FRACTION = 1e-14

OK = 0
NONFINITE = 1
MAX_STEPS = 2
STEP_TOO_SMALL = 3

_STATUS_TEXT = {
    NONFINITE: "non-finite derivative",
    MAX_STEPS: "maximum step count exceeded",
    STEP_TOO_SMALL: "step size fell below the minimum step floor",
}

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0],
        [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ]
)
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between the 5th and embedded 4th order weights
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)
# Shampine's 4th-order continuous extension, coefficients of sigma**1..4
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

# PI step-size controller constants (Hairer, Norsett & Wanner, DOPRI5)
_SAFETY = 0.9
_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA
_FAC_MIN = 0.2
_FAC_MAX = 10.0


@njit(cache=True)
def _scaled_rms(err, y, ynew, rtol, atol):
    s = 0.0
    for i in range(err.shape[0]):
        sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
        s += (err[i] / sc) ** 2
    return np.sqrt(s / err.shape[0])


@njit(cache=True)
def _dense(y, k, h, sigma, out):
    s1 = sigma
    s2 = sigma * sigma
    s3 = s2 * sigma
    s4 = s3 * sigma
    for i in range(y.shape[0]):
        q0 = 0.0
        q1 = 0.0
        q2 = 0.0
        q3 = 0.0
        for s in range(7):
            q0 += k[s, i] * _P[s, 0]
            q1 += k[s, i] * _P[s, 1]
            q2 += k[s, i] * _P[s, 2]
            q3 += k[s, i] * _P[s, 3]
        out[i] = y[i] + h * (q0 * s1 + q1 * s2 + q2 * s3 + q3 * s4)


@njit(cache=True)
def _all_finite(v):
    for i in range(v.shape[0]):
        if not np.isfinite(v[i]):
            return False
    return True


# The functions below call the module-level name ``_RHS``. They are never run
# as written: ``_build_kernels`` copies them into a namespace where ``_RHS`` is
# a concrete right-hand side and compiles each copy separately, so every
# system gets its own cached machine code without a runtime dispatch.

def _initial_step(params, y0, f0, t_end, rtol, atol):
    n = y0.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + abs(y0[i]) * rtol
        d0 += (y0[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = np.sqrt(d0 / n)
    d1 = np.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, t_end)
    y1 = y0 + h0 * f0
    f1 = np.empty(n)
    _RHS(y1, params, f1)
    d2 = 0.0
    for i in range(n):
        sc = atol + abs(y0[i]) * rtol
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = np.sqrt(d2 / n) / h0
    if not np.isfinite(d2):
        return h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, t_end)


def _dopri5(params, y0, t_end, t_eval, rtol, atol, max_steps, record):
    """Integrate from 0 to ``t_end``.

    Returns ``(status, t_fail, y_eval, n_knots, knots, states, stages)``.
    ``y_eval`` holds the dense-output state at every (sorted) ``t_eval``.
    When ``record`` is false only ``y_eval`` is meaningful.
    """
    dim = y0.shape[0]
    n_eval = t_eval.shape[0]
    y_eval = np.full((n_eval, dim), np.nan)

    cap = 64 if record else 1
    knots = np.empty(cap)
    states = np.empty((cap, dim))
    stages = np.zeros((cap, 7, dim))
    knots[0] = 0.0
    states[0] = y0
    n_knots = 1

    j = 0
    while j < n_eval and t_eval[j] <= 0.0:
        y_eval[j] = y0
        j += 1

    y = y0.copy()
    f = np.empty(dim)
    _RHS(y, params, f)
    if not _all_finite(f):
        return NONFINITE, 0.0, y_eval, n_knots, knots, states, stages
    if t_end <= 0.0:
        return OK, 0.0, y_eval, n_knots, knots, states, stages

    h_floor = MIN_STEP_FRACTION * t_end
    h = _initial_step(params, y, f, t_end, rtol, atol)
    k = np.empty((7, dim))
    ytmp = np.empty(dim)
    ynew = np.empty(dim)
    err = np.empty(dim)
    t = 0.0
    fac_old = 1e-4
    rejected = False
    n_accepted = 0

    while t < t_end:
        if n_accepted >= max_steps:
            return MAX_STEPS, t, y_eval, n_knots, knots, states, stages
        if h < h_floor:
            return STEP_TOO_SMALL, t, y_eval, n_knots, knots, states, stages
        last = False
        if t + h >= t_end:
            h = t_end - t
            last = True

        k[0] = f
        for s in range(1, 7):
            for i in range(dim):
                acc = 0.0
                for r in range(s):
                    acc += _A[s, r] * k[r, i]
                ytmp[i] = y[i] + h * acc
            _RHS(ytmp, params, k[s])
            if not _all_finite(k[s]):
                return NONFINITE, t, y_eval, n_knots, knots, states, stages
        # stage 6 was evaluated at the 5th-order solution (FSAL)
        for i in range(dim):
            ynew[i] = ytmp[i]
            acc = 0.0
            for s in range(7):
                acc += _E[s] * k[s, i]
            err[i] = h * acc
        err_norm = _scaled_rms(err, y, ynew, rtol, atol)

        fac11 = err_norm**_EXPO
        if err_norm <= 1.0:
            fac = fac11 / fac_old**_BETA
            fac = max(1.0 / _FAC_MAX, min(1.0 / _FAC_MIN, fac / _SAFETY))
            h_next = h / fac
            if rejected:
                h_next = min(h_next, h)
            fac_old = max(err_norm, 1e-4)
            rejected = False

            t_new = t_end if last else t + h
            while j < n_eval and t_eval[j] <= t_new:
                if t_eval[j] == t_new:
                    y_eval[j] = ynew
                else:
                    _dense(y, k, h, (t_eval[j] - t) / h, y_eval[j])
                j += 1

            if record:
                if n_knots == knots.shape[0]:
                    grow = 2 * knots.shape[0]
                    knots2 = np.empty(grow)
                    states2 = np.empty((grow, dim))
                    stages2 = np.zeros((grow, 7, dim))
                    knots2[:n_knots] = knots[:n_knots]
                    states2[:n_knots] = states[:n_knots]
                    stages2[:n_knots] = stages[:n_knots]
                    knots, states, stages = knots2, states2, stages2
                stages[n_knots - 1] = k
                knots[n_knots] = t_new
                states[n_knots] = ynew
                n_knots += 1

            t = t_new
            y[:] = ynew
            f[:] = k[6]
            n_accepted += 1
            h = h_next
        else:
            h = h / min(1.0 / _FAC_MIN, fac11 / _SAFETY)
            rejected = True

    return OK, t, y_eval, n_knots, knots, states, stages


def _batch_final(params, y0, t_ends, rtol, atol, max_steps, out, status):
    one = np.empty(1)
    for i in range(t_ends.shape[0]):
        one[0] = t_ends[i]
        st, _, y_eval, _, _, _, _ = _dopri5(
            params[i], y0[i], t_ends[i], one, rtol, atol, max_steps, False
        )
        status[i] = st
        out[i] = y_eval[0]


def _batch_grid(params, y0, grid, rtol, atol, max_steps, out, status):
    for i in range(params.shape[0]):
        st, _, y_eval, _, _, _, _ = _dopri5(
            params[i], y0[i], grid[-1], grid, rtol, atol, max_steps, False
        )
        status[i] = st
        out[i] = y_eval


_TEMPLATES = (_initial_step, _dopri5, _batch_final, _batch_grid)


def _build_kernels(rhs, suffix: str, jit: bool) -> SimpleNamespace:
    env = dict(globals())
    env["_RHS"] = rhs
    out = {}
    for f in _TEMPLATES:
        g = types.FunctionType(f.__code__, env, f.__name__, f.__defaults__)
        g.__qualname__ = f"{f.__name__}_{suffix}"
        if jit:
            g = njit(cache=True, nogil=True)(g)
        env[f.__name__] = g
        out[f.__name__.lstrip("_")] = g
    return SimpleNamespace(**out)


_COMPILED = {
    systems.logistic_rhs: _build_kernels(systems.logistic_rhs, "logistic", True),
    systems.hazard_response_rhs: _build_kernels(systems.hazard_response_rhs, "hazard_response", True),
}


def kernels_for(rhs) -> SimpleNamespace:
    """Compiled kernels for a built-in system, interpreted ones otherwise."""
    k = _COMPILED.get(rhs)
    return k if k is not None else _build_kernels(rhs, "python", False)


class IntegrationError(RuntimeError):
    """Raised when a solve fails; ``t`` is the time at which it failed."""

    def __init__(self, status: int, t: float):
        self.status = status
        self.t = float(t)
        super().__init__(f"{_STATUS_TEXT.get(status, 'integration failure')} at t={self.t:.6g}")


@dataclass(frozen=True)
class OdeSystem:
    """An autonomous system ``y' = rhs(y, params)`` of fixed dimension.

    ``rhs(y, params, out)`` fills ``out`` in place.
    """

    dimension: int
    rhs: Callable
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise ValueError("dimension must be a positive integer")
        object.__setattr__(self, "params", np.ascontiguousarray(self.params, dtype=float))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Accepted knots of an integration plus the stage data for dense output.

    ``stages[i]`` holds the seven stage derivatives of the step from
    ``knots[i]`` to ``knots[i + 1]``.
    """

    knots: np.ndarray
    states: np.ndarray
    stages: np.ndarray

    @property
    def t_end(self) -> float:
        return float(self.knots[-1])

    def evaluate_at(self, t):
        return evaluate_at(self, t)


def integrate(system: OdeSystem, y0, t_end: float, rtol: float = DEFAULT_RTOL,
              atol: float = DEFAULT_ATOL, max_steps: int = DEFAULT_MAX_STEPS) -> Trajectory:
    """Integrate ``system`` from ``y0`` at t=0 up to ``t_end``.

    Raises
    ------
    IntegrationError
        On a non-finite derivative, too many steps, or a collapsed step size.
    """
    y0 = np.array(y0, dtype=float).reshape(-1)
    if y0.shape[0] != system.dimension:
        raise ValueError(f"y0 has length {y0.shape[0]}, system dimension is {system.dimension}")
    t_end = float(t_end)
    if not np.isfinite(t_end) or t_end < 0:
        raise ValueError("t_end must be finite and non-negative")
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    status, t_fail, _, n, knots, states, stages = kernels_for(system.rhs).dopri5(
        system.params, y0, t_end, np.zeros(0), float(rtol), float(atol),
        int(max_steps), True,
    )
    if status != OK:
        raise IntegrationError(status, t_fail)
    knots = knots[:n].copy()
    states = states[:n].copy()
    stages = stages[: max(n - 1, 0)].copy()
    for a in (knots, states, stages):
        a.setflags(write=False)
    return Trajectory(knots, states, stages)


def evaluate_at(traj: Trajectory, t: float) -> np.ndarray:
    """State at time ``t`` by the continuous extension of the step containing it.

    Knot times return the stored state exactly.
    """
    t = float(t)
    knots = traj.knots
    if not (0.0 <= t <= knots[-1]) or np.isnan(t):
        raise ValueError(f"t={t} outside the integrated range [0, {knots[-1]}]")
    i = int(np.searchsorted(knots, t, side="right")) - 1
    if knots[i] == t:
        return traj.states[i].copy()
    h = knots[i + 1] - knots[i]
    out = np.empty(traj.states.shape[1])
    _dense(traj.states[i], traj.stages[i], h, (t - knots[i]) / h, out)
    return out


def solve_at(system: OdeSystem, y0, times, rtol: float = DEFAULT_RTOL,
             atol: float = DEFAULT_ATOL, max_steps: int = DEFAULT_MAX_STEPS) -> np.ndarray:
    """States at sorted ``times`` from a single integration to ``times[-1]``."""
    times = np.ascontiguousarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be a non-empty, sorted, non-negative sequence")
    y0 = np.array(y0, dtype=float).reshape(-1)
    status, t_fail, y_eval, *_ = kernels_for(system.rhs).dopri5(
        system.params, y0, float(times[-1]), times, float(rtol), float(atol),
        int(max_steps), False,
    )
    if status != OK:
        raise IntegrationError(status, t_fail)
    return y_eval




def solve_batch_final(rhs, params, y0, t_ends, rtol, atol, max_steps, out, status):
    """Final states of one solve per row of ``params``, each on ``[0, t_ends[i]]``.

    ``y0`` holds one initial state per row. Writes into ``out`` (n x dim) and ``status`` (n,). Releases the GIL for
    the built-in systems.
    """
    kernels_for(rhs).batch_final(params, y0, t_ends, rtol, atol, max_steps, out, status)


def solve_batch_grid(rhs, params, y0, grid, rtol, atol, max_steps, out, status):
    """Dense-output states on a shared sorted ``grid`` for each row of ``params``.

    ``y0`` holds one initial state per row. Writes into ``out`` (n x len(grid) x dim) and ``status`` (n,).
    """
    kernels_for(rhs).batch_grid(params, y0, grid, rtol, atol, max_steps, out, status)
