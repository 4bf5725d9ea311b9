"""Semi-analytic Heston call price (characteristic function, single integral).

The log-price has zero drift correction under the pricing measure:
``dX = -y/2 dt + sqrt(y) dW1``, ``dY = kappa(theta - y) dt + delta sqrt(y) dW2``,
``d<W1, W2> = rho dt``.  The Sharpe ratio drops out of these dynamics.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from ..operator_engine import QuadratureError


def heston_cf(u, tau: float, y: float, delta: float, theta: float, kappa: float, rho: float):
    """``E[exp(i u (X_T - x))]`` in the branch-cut-safe ("little trap") form."""
    iu = 1j * u
    beta = kappa - rho * delta * iu
    d = np.sqrt(beta * beta + delta * delta * (iu + u * u))
    g = (beta - d) / (beta + d)
    e = np.exp(-d * tau)
    D = (beta - d) / delta**2 * (1.0 - e) / (1.0 - g * e)
    C = kappa * theta / delta**2 * ((beta - d) * tau - 2.0 * np.log((1.0 - g * e) / (1.0 - g)))
    return np.exp(C + D * y)


def heston_call_exact(delta: float, theta: float, kappa: float, rho: float, x: float, y: float,
                      k: float, T: float, t: float = 0.0, epsabs: float = 1e-10) -> float:
    """Call price via the single-integral formula along ``Im u = -1/2``."""
    tau = T - t
    if tau <= 0.0:
        raise ValueError("T must exceed t")
    if min(delta, theta, kappa) <= 0.0 or y < 0.0 or abs(rho) > 1.0:
        raise ValueError("invalid Heston parameters")
    L = x - k

    def integrand(u):
        phi = heston_cf(u - 0.5j, tau, y, delta, theta, kappa, rho)
        return (np.exp(1j * u * L) * phi).real / (u * u + 0.25)

    scale = math.exp(0.5 * (x + k)) / math.pi
    val, err = integrate.quad(integrand, 0.0, np.inf, epsabs=epsabs / scale, epsrel=0.0, limit=500)
    if not np.isfinite(val) or err * scale > 10 * epsabs:
        raise QuadratureError("Heston integral did not converge", val, err)
    return math.exp(x) - scale * val
