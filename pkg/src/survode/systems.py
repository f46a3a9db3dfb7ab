"""Compiled right-hand sides of the built-in hazard systems.

State layouts: logistic ``(h, H)``; hazard-response ``(h, q, H)``. ``theta``
holds the ODE parameters in the order ``(lambda, kappa[, alpha, mu])``.
"""
from numba import njit


@njit(cache=True)
def logistic_rhs(y, theta, out):
    lam = theta[0]
    kappa = theta[1]
    h = y[0]
    out[0] = lam * h * (1.0 - h / kappa)
    out[1] = h


@njit(cache=True)
def hazard_response_rhs(y, theta, out):
    lam = theta[0]
    kappa = theta[1]
    alpha = theta[2]
    mu = theta[3]
    h = y[0]
    q = y[1]
    aqh = alpha * q * h
    out[0] = lam * h * (1.0 - h / kappa) - aqh
    out[1] = mu * q * (1.0 - q / kappa) - aqh
    out[2] = h
