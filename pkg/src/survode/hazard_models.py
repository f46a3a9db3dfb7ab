"""ODE hazard families, link-transformed linear predictors and attractors.

Two families are provided:

``logistic``
    h' = lambda h (1 - h / kappa), with closed-form h and H.
``hazard_response``
    h' = lambda h (1 - h / kappa) - alpha q h
    q' = mu q (1 - q / kappa) - alpha q h
    H' = h

Each ODE parameter is the inverse link of an intercept plus a linear
combination of selected covariate columns.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import systems

OVERFLOW_CAP = 1e12
_LOG_CAP = math.log(OVERFLOW_CAP)
DEGENERACY_TOL = 1e-12

FAMILY_PARAMS = {
    "logistic": ("lambda", "kappa"),
    "hazard_response": ("lambda", "kappa", "alpha", "mu"),
}


@dataclass(frozen=True)
class LinkFunction:
    kind: str = "log"

    def __post_init__(self):
        if self.kind not in ("log", "identity"):
            raise ValueError(f"unknown link {self.kind!r}")

    def forward(self, theta):
        return np.log(theta) if self.kind == "log" else np.asarray(theta, dtype=float)

    def inverse(self, value):
        """Map a linear predictor to the parameter scale.

        The log link saturates at ``OVERFLOW_CAP``; use ``inverse_flagged`` to
        learn whether that happened.
        """
        return self.inverse_flagged(value)[0]

    def inverse_flagged(self, value):
        value = np.asarray(value, dtype=float)
        if np.isnan(value).any():
            raise ValueError("NaN linear predictor")
        if self.kind == "identity":
            return value, False
        saturated = bool((value > _LOG_CAP).any())
        return np.where(value > _LOG_CAP, OVERFLOW_CAP, np.exp(np.minimum(value, _LOG_CAP))), saturated


LOG = LinkFunction("log")
IDENTITY = LinkFunction("identity")


def _check_positive(obj, names):
    for name in names:
        v = getattr(obj, name)
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class LogisticParams:
    lam: float
    kappa: float
    h0: float

    def __post_init__(self):
        _check_positive(self, ("lam", "kappa", "h0"))


@dataclass(frozen=True)
class HazardResponseParams:
    lam: float
    kappa: float
    alpha: float
    mu: float
    h0: float = 0.01
    q0: float = 1e-6

    def __post_init__(self):
        _check_positive(self, ("lam", "kappa", "alpha", "mu", "h0", "q0"))


@dataclass(frozen=True)
class ModelSpec:
    """Model family, one predictor per ODE parameter, and initial conditions.

    ``formulas[k]`` lists the covariate columns entering the predictor of the
    k-th ODE parameter (order as in ``FAMILY_PARAMS``). ``h0=None`` makes the
    initial hazard a free parameter, carried on the log scale as the last
    entry of the parameter vector (logistic family only). ``h0="kappa"`` ties
    the initial hazard to each individual's carrying capacity, which makes
    the logistic hazard constant (the exponential model).
    """

    family: str
    formulas: tuple
    links: tuple = ()
    h0: Optional[float] = 0.01
    q0: float = 1e-6
    max_time: float = np.inf
    strict_links: bool = True

    def __post_init__(self):
        if self.family not in FAMILY_PARAMS:
            raise ValueError(f"unknown family {self.family!r}")
        d = len(FAMILY_PARAMS[self.family])
        formulas = tuple(tuple(int(j) for j in f) for f in self.formulas)
        if len(formulas) != d:
            raise ValueError(f"{self.family} needs {d} formulas, got {len(formulas)}")
        for f in formulas:
            if len(set(f)) != len(f) or any(j < 0 for j in f):
                raise ValueError(f"invalid formula {f}")
        object.__setattr__(self, "formulas", formulas)
        links = tuple(self.links) if self.links else (LOG,) * d
        links = tuple(LinkFunction(l) if isinstance(l, str) else l for l in links)
        if len(links) != d:
            raise ValueError(f"expected {d} links, got {len(links)}")
        if self.strict_links:
            for name, link in zip(self.param_names, links):
                if link.kind != "log":
                    raise ValueError(f"{name} is positive; identity link not allowed")
        object.__setattr__(self, "links", links)
        if self.h0 is None and self.family != "logistic":
            raise ValueError("a free h0 is only supported for the logistic family")
        if isinstance(self.h0, str):
            if self.h0 != "kappa":
                raise ValueError(f"h0 must be a number, None or 'kappa', got {self.h0!r}")
        elif self.h0 is not None and not self.h0 > 0:
            raise ValueError("h0 must be positive")
        if not self.q0 > 0:
            raise ValueError("q0 must be positive")
        if not self.max_time > 0:
            raise ValueError("max_time must be positive")

    @property
    def param_names(self):
        return FAMILY_PARAMS[self.family]

    @property
    def h0_free(self) -> bool:
        return self.h0 is None

    @property
    def h0_tied(self) -> bool:
        return isinstance(self.h0, str)

    @property
    def n_params(self) -> int:
        """Length of the flat parameter vector."""
        return sum(1 + len(f) for f in self.formulas) + int(self.h0_free)

    @property
    def state_dim(self) -> int:
        return 2 if self.family == "logistic" else 3

    def block_slices(self):
        out, off = [], 0
        for f in self.formulas:
            out.append(slice(off, off + 1 + len(f)))
            off += 1 + len(f)
        return out

    def coefficient_names(self, column_names: Optional[Sequence[str]] = None):
        names = []
        for pname, f in zip(self.param_names, self.formulas):
            names.append(f"{pname}:(intercept)")
            for j in f:
                names.append(f"{pname}:{column_names[j] if column_names is not None else j}")
        if self.h0_free:
            names.append("log_h0")
        return names

    def with_formulas(self, formulas) -> "ModelSpec":
        return ModelSpec(self.family, formulas, self.links, self.h0, self.q0,
                         self.max_time, self.strict_links)

    def check_columns(self, p: int):
        for f in self.formulas:
            for j in f:
                if j >= p:
                    raise ValueError(f"formula column {j} out of range for {p} covariates")


@dataclass(frozen=True)
class ParamVector:
    """Intercept and coefficients per ODE parameter, plus an optional log h0."""

    blocks: tuple
    log_h0: Optional[float] = None

    def to_array(self) -> np.ndarray:
        parts = []
        for intercept, coefs in self.blocks:
            parts.append([float(intercept)])
            parts.append(np.asarray(coefs, dtype=float).reshape(-1))
        if self.log_h0 is not None:
            parts.append([float(self.log_h0)])
        arr = np.concatenate(parts) if parts else np.zeros(0)
        if not np.isfinite(arr).all():
            raise ValueError("parameter vector must be finite")
        return arr

    @classmethod
    def from_array(cls, spec: ModelSpec, eta) -> "ParamVector":
        eta = as_eta(spec, eta)
        blocks = tuple((float(eta[s][0]), eta[s][1:].copy()) for s in spec.block_slices())
        return cls(blocks, float(eta[-1]) if spec.h0_free else None)


def as_eta(spec: ModelSpec, eta) -> np.ndarray:
    if isinstance(eta, ParamVector):
        eta = eta.to_array()
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.shape[0] != spec.n_params:
        raise ValueError(f"parameter vector has length {eta.shape[0]}, model needs {spec.n_params}")
    return eta


def predictor_values(spec: ModelSpec, eta, X):
    """ODE parameters for every row of ``X``.

    Returns ``(theta, saturated)`` where ``theta`` is ``(n, d)`` in the order
    of ``spec.param_names`` and ``saturated`` flags a capped exponential.
    """
    eta = as_eta(spec, eta)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if np.isnan(X).any() or np.isnan(eta).any():
        raise ValueError("NaN in covariates or parameters")
    n = X.shape[0]
    theta = np.empty((n, len(spec.formulas)))
    saturated = False
    for k, (sl, cols, link) in enumerate(zip(spec.block_slices(), spec.formulas, spec.links)):
        b = eta[sl]
        lin = np.full(n, b[0])
        if cols:
            lin = lin + X[:, list(cols)] @ b[1:]
        theta[:, k], sat = link.inverse_flagged(lin)
        saturated |= sat
    return theta, saturated


def initial_hazard(spec: ModelSpec, eta, theta=None):
    """h0 as a scalar, or one value per row of ``theta`` when tied to kappa."""
    if spec.h0_free:
        return float(np.exp(min(as_eta(spec, eta)[-1], _LOG_CAP)))
    if spec.h0_tied:
        if theta is None:
            raise ValueError("a tied h0 needs the per-row ODE parameters")
        return theta[:, 1].copy()
    return float(spec.h0)


def initial_states(spec: ModelSpec, eta, theta) -> np.ndarray:
    """Initial ODE state for each row of ``theta`` (n x state_dim)."""
    n = theta.shape[0]
    y0 = np.zeros((n, spec.state_dim))
    y0[:, 0] = initial_hazard(spec, eta, theta)
    if spec.family == "hazard_response":
        y0[:, 1] = spec.q0
    return y0


def eval_predictors(spec: ModelSpec, eta, x):
    """ODE parameter set for a single covariate row."""
    x = np.asarray(x, dtype=float).reshape(-1)
    theta, _ = predictor_values(spec, eta, x[None, :])
    h0 = initial_hazard(spec, eta, theta)
    h0 = float(h0[0]) if np.ndim(h0) else h0
    if spec.family == "logistic":
        return LogisticParams(theta[0, 0], theta[0, 1], h0)
    return HazardResponseParams(*theta[0], h0=h0, q0=spec.q0)


# -- logistic closed form ---------------------------------------------------

def logistic_hazard(t, lam, kappa, h0):
    t, lam, kappa, h0 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, lam, kappa, h0)))
    e = np.exp(-lam * t)
    return kappa * h0 / (kappa * e + h0 * (1.0 - e))


def logistic_cumhaz(t, lam, kappa, h0):
    t, lam, kappa, h0 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, lam, kappa, h0)))
    x = lam * t
    small = x < 30.0
    out = np.empty(x.shape)
    xs = np.where(small, x, 0.0)
    out[small] = (kappa / lam * np.log1p(h0 / kappa * np.expm1(xs)))[small]
    # e^x overflows eventually; factor it out of the log
    xl = np.where(small, 0.0, x)
    big = ~small
    out[big] = (kappa / lam * (xl + np.log(h0 / kappa + (1.0 - h0 / kappa) * np.exp(-xl))))[big]
    return out


# -- right-hand sides -------------------------------------------------------

def hazard_response_rhs(state, p: HazardResponseParams) -> np.ndarray:
    h, q, _ = (float(v) for v in state)
    return np.array([
        p.lam * h * (1.0 - h / p.kappa) - p.alpha * q * h,
        p.mu * q * (1.0 - q / p.kappa) - p.alpha * q * h,
        h,
    ])


def family_rhs(family: str):
    """Compiled in-place right-hand side for ``family``."""
    return systems.logistic_rhs if family == "logistic" else systems.hazard_response_rhs


# -- attractors -------------------------------------------------------------

class AttractorKind(enum.Enum):
    HAZARD_WINS = "HazardWins"
    RESPONSE_WINS = "ResponseWins"
    COEXISTENCE = "Coexistence"
    BISTABLE = "Bistable"
    DEGENERATE = "Degenerate"


@dataclass(frozen=True)
class Attractor:
    kind: AttractorKind
    h_star: float
    q_star: float
    D: float


def classify_attractor(p: HazardResponseParams) -> Attractor:
    """Classify the long-time regime of the hazard-response system.

    With ``D = 1 - (alpha kappa)^2 / (lambda mu)`` the interior equilibrium is
    ``h* = kappa (1 - alpha kappa / lambda) / D`` and
    ``q* = kappa (1 - alpha kappa / mu) / D``.

    The regime follows from which corner can be invaded. ``q`` grows at the
    corner ``(kappa, 0)`` iff ``mu > alpha kappa``; ``h`` grows at
    ``(0, kappa)`` iff ``lambda > alpha kappa``. For ``D > 0`` this reduces to
    the sign rule (``q* < 0``: hazard wins, ``h* < 0``: response wins, both
    positive: coexistence). For ``D < 0`` the signs swap roles, and both
    starred values positive means both corners are stable (``BISTABLE``; the
    outcome then depends on the initial state).
    """
    ak = p.alpha * p.kappa
    D = 1.0 - ak * ak / (p.lam * p.mu)
    if abs(D) < DEGENERACY_TOL:
        return Attractor(AttractorKind.DEGENERATE, np.nan, np.nan, D)
    h_star = p.kappa * (1.0 - ak / p.lam) / D
    q_star = p.kappa * (1.0 - ak / p.mu) / D
    if abs(h_star) < DEGENERACY_TOL or abs(q_star) < DEGENERACY_TOL:
        kind = AttractorKind.DEGENERATE
    elif h_star > 0 and q_star > 0:
        kind = AttractorKind.COEXISTENCE if D > 0 else AttractorKind.BISTABLE
    elif (q_star < 0) == (D > 0):
        kind = AttractorKind.HAZARD_WINS
    else:
        kind = AttractorKind.RESPONSE_WINS
    return Attractor(kind, h_star, q_star, D)
