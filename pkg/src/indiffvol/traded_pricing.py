"""Expansion of the indifference price of a European call written on the traded asset.

Price terms are built from normal-ordered operators applied to the
Black-Scholes price at ``sigma0 = sqrt(2 a00)``.  Every surviving term has the
form ``d_x^n (d_x^2 - d_x) u_BS`` and is reduced to a Hermite multiple of the
Black-Scholes gamma factor, so no numerical differentiation is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .model_spec import TaylorTable
from .operator_engine import (
    QuadratureError,
    WeylElement,
    coefficient_operator,
    compose,
    divide_by_gamma_operator,
    g_operator,
    hermite_ratio,
    time_integral,
    x_derivative_profile,
)

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class CallSpec:
    k: float
    T: float
    t: float = 0.0

    def __post_init__(self):
        if not self.T > self.t:
            raise ValueError(f"maturity T={self.T} must exceed valuation time t={self.t}")
        if not math.isfinite(self.k):
            raise ValueError("log-strike must be finite")

    @property
    def tau(self) -> float:
        return self.T - self.t


@dataclass(frozen=True)
class IndifferenceSetting:
    """``gamma_nu > 0`` is a buyer, ``gamma_nu < 0`` a seller."""

    gamma_nu: float
    x: float
    y: float

    @property
    def side(self) -> str:
        if self.gamma_nu > 0:
            return "buyer"
        if self.gamma_nu < 0:
            return "seller"
        return "linear"

    def flipped(self) -> "IndifferenceSetting":
        return IndifferenceSetting(-self.gamma_nu, self.x, self.y)


@dataclass(frozen=True)
class PriceExpansion:
    u0: float
    u1: float
    u2_lin: float
    u2_ind: float
    # the two pieces of u2_ind and the quadrature error bound of the second
    u2_ind_eta: float = 0.0
    u2_ind_quad: float = 0.0
    quad_error: float = 0.0

    @property
    def ubar(self) -> Tuple[float, float, float]:
        u0 = self.u0
        return (u0, u0 + self.u1, u0 + self.u1 + self.u2_lin + self.u2_ind)

    @property
    def qbar2(self) -> float:
        """Second-order linear price (no position dependence)."""
        return self.u0 + self.u1 + self.u2_lin


@dataclass(frozen=True)
class EtaExpansion:
    eta0: float
    eta1: float
    eta2: float

    @property
    def etabar(self) -> Tuple[float, float, float]:
        return (self.eta0, self.eta0 + self.eta1, self.eta0 + self.eta1 + self.eta2)


# --- Black-Scholes ------------------------------------------------------------


def _d_plus_minus(x, sigma, k, tau):
    sq = sigma * np.sqrt(tau)
    dp = (x - k) / sq + 0.5 * sq
    return dp, dp - sq


def bs_call(t, x, sigma, k, T):
    """Call price ``e^x N(d+) - e^k N(d-)``; ``sigma <= 0`` returns the intrinsic value."""
    tau = T - t
    if not tau > 0.0:
        raise ValueError("T must exceed t")
    if sigma <= 0.0:
        return max(math.exp(x) - math.exp(k), 0.0)
    dp, dm = _d_plus_minus(x, sigma, k, tau)
    return math.exp(x) * ndtr(dp) - math.exp(k) * ndtr(dm)


def bs_vega(t, x, sigma, k, T):
    tau = T - t
    dp, _ = _d_plus_minus(x, sigma, k, tau)
    return math.exp(x - 0.5 * dp * dp) / SQRT_2PI * math.sqrt(tau)


def bs_vomma(t, x, sigma, k, T):
    """Second sigma-derivative, via ``vega * d+ d- / sigma``."""
    tau = T - t
    dp, dm = _d_plus_minus(x, sigma, k, tau)
    return bs_vega(t, x, sigma, k, T) * dp * dm / sigma


def gamma_factor(x, sigma, k, tau):
    """``(d_x^2 - d_x) u_BS``, i.e. ``e^k phi(d-) / (sigma sqrt(tau))``."""
    _, dm = _d_plus_minus(x, sigma, k, tau)
    return math.exp(k - 0.5 * dm * dm) / (SQRT_2PI * sigma * math.sqrt(tau))


def hermite_argument(x, sigma, k, tau):
    return (x - k - 0.5 * sigma * sigma * tau) / (sigma * math.sqrt(2.0 * tau))


# --- operators (cached per table) ---------------------------------------------


def _table_key(taylor: TaylorTable):
    return (taylor.xbar, taylor.ybar, taylor.rho,
            *(tuple(taylor.coeff(n).ravel()) for n in ("a", "b", "f", "g", "h")))


@lru_cache(maxsize=64)
def _operators(key) -> dict:
    taylor = _table_from_key(key)
    g1 = g_operator(1, taylor, var=1)
    g1_outer = g_operator(1, taylor, var=1)
    g1_inner = g_operator(1, taylor, var=2)
    g2 = g_operator(2, taylor, var=1)
    u1 = time_integral(g1, 1)
    u2 = time_integral(g2, 1) + time_integral(compose(g1_outer, g1_inner), 2)
    h1 = coefficient_operator(taylor, "h", 1, var=1)
    h1_inner = coefficient_operator(taylor, "h", 1, var=2)
    h2 = coefficient_operator(taylor, "h", 2, var=1)
    eta1 = time_integral(h1, 1).scale(-1.0)
    eta2 = (time_integral(compose(g1_outer, h1_inner), 2).scale(-1.0)
            + time_integral(h2, 1).scale(-1.0))
    return {"u1": u1, "u2": u2, "eta1": eta1, "eta2": eta2}


def _table_from_key(key) -> TaylorTable:
    xbar, ybar, rho = key[:3]
    arrays = {n: np.array(v).reshape(3, 3) for n, v in zip(("a", "b", "f", "g", "h"), key[3:])}
    return TaylorTable(xbar=xbar, ybar=ybar, rho=rho, **arrays)


def price_operators(taylor: TaylorTable) -> dict:
    """Time-integrated operators ``{"u1", "u2", "eta1", "eta2"}`` as functions of tau."""
    return _operators(_table_key(taylor))


def apply_to_call(op: WeylElement, taylor: TaylorTable, x: float, y: float,
                  k: float, tau: float) -> float:
    """Apply a tau-dependent element to ``u_BS(sigma0)`` at ``(x, y)`` via Hermite reduction."""
    s0 = taylor.sigma0
    prof = x_derivative_profile(op.at_time(tau=tau), x, y, taylor.xbar, taylor.ybar)
    q, r0, r1 = divide_by_gamma_operator(prof)
    z = hermite_argument(x, s0, k, tau)
    gam = gamma_factor(x, s0, k, tau)
    total = sum(qn * hermite_ratio(n, z, s0, tau) for n, qn in enumerate(q) if qn != 0.0) * gam
    if r0 or r1:
        # generators annihilate 1 and e^x, so these vanish up to round-off;
        # they are kept so the result is the exact action of op
        dp, _ = _d_plus_minus(x, s0, k, tau)
        total += r0 * bs_call(0.0, x, s0, k, tau) + r1 * math.exp(x) * ndtr(dp)
    return total


# --- eta --------------------------------------------------------------------


def eta1_closed_form(taylor: TaylorTable, tau: float, x: float, y: float) -> float:
    """Explicit first-order term of eta."""
    h10, h01 = taylor.h[1, 0], taylor.h[0, 1]
    a0, f0 = taylor.a[0, 0], taylor.f[0, 0]
    dx, dy = x - taylor.xbar, y - taylor.ybar
    return -tau * (h10 * dx + h01 * dy) + 0.5 * tau * tau * (h10 * a0 - h01 * f0)


def eta_terms(taylor: TaylorTable, t: float, x: float, y: float, T: float) -> EtaExpansion:
    tau = T - t
    if not tau > 0.0:
        raise ValueError("T must exceed t")
    ops = price_operators(taylor)
    xb, yb = taylor.xbar, taylor.ybar
    eta0 = -tau * taylor.h[0, 0]
    eta1 = ops["eta1"].at_time(tau=tau).apply_to_one(x, y, xb, yb)
    cubic = tau**3 / 3.0 * (1.0 - taylor.rho**2) * taylor.b[0, 0] * taylor.h[0, 1] ** 2
    eta2 = ops["eta2"].at_time(tau=tau).apply_to_one(x, y, xb, yb) + cubic
    return EtaExpansion(eta0, eta1, eta2)


# --- u ------------------------------------------------------------------------


def indifference_kernel(L: float, sigma0: float, tau: float, epsabs: float = 1e-12):
    """Scaled time integral shared by the price and implied-vol forms of the
    second ``u2_ind`` piece.

    Returns ``(J, err)`` with
    ``J = int_0^tau (tau - s)^{3/2} (tau + s)^{-1/2} exp(w/(2 s0^2 tau) - w/(s0^2 (tau + s))) ds``
    and ``w = (L + s0^2 tau / 2)^2``.  The exponent is non-positive, so the
    integrand stays bounded by ``tau``.
    """
    w = (L + 0.5 * sigma0 * sigma0 * tau) ** 2
    v = sigma0 * sigma0

    def integrand(s):
        return (tau - s) ** 1.5 / math.sqrt(tau + s) * math.exp(w / (2 * v * tau) - w / (v * (tau + s)))

    val, err, info = _quad(integrand, tau, epsabs)
    return val, err


def _quad(func, tau, epsabs):
    out = integrate.quad(func, 0.0, tau, epsabs=epsabs, epsrel=1e-13, limit=200, full_output=1)
    val, err = out[0], out[1]
    if len(out) > 3 and err > max(epsabs, 1e-10 * abs(val)):
        raise QuadratureError("u2_ind time integral did not converge", estimate=val, error=err)
    return val, err, out[2]


def y_derivative_of_u1(taylor: TaylorTable, spec: CallSpec, t1: float, x: float) -> float:
    """``d_y u1(t1) = (T - t1) a01 (d_x^2 - d_x) u0(t1)``."""
    rem = spec.T - t1
    if rem <= 0.0 or taylor.a[0, 1] == 0.0:
        return 0.0
    return rem * taylor.a[0, 1] * gamma_factor(x, taylor.sigma0, spec.k, rem)


def _u2_ind_pieces(taylor: TaylorTable, spec: CallSpec, setting: IndifferenceSetting,
                   epsabs: float = 1e-12):
    tau = spec.tau
    rho, b0 = taylor.rho, taylor.b[0, 0]
    a01, h01 = taylor.a[0, 1], taylor.h[0, 1]
    pref = (1.0 - rho * rho) * b0
    if pref == 0.0 or a01 == 0.0:
        return 0.0, 0.0, 0.0
    s0 = taylor.sigma0
    gam = gamma_factor(setting.x, s0, spec.k, tau)
    # 2 * iint (d_y eta1)(d_y G1) u0 with d_y eta1(s1) = -h01 (tau - s1)
    first = pref * (-2.0 / 3.0) * h01 * a01 * tau**3 * gam
    if setting.gamma_nu == 0.0:
        return first, 0.0, 0.0
    L = spec.k - setting.x
    J, err = indifference_kernel(L, s0, tau, epsabs=epsabs / max(abs(setting.gamma_nu), 1.0))
    w = (L + 0.5 * s0 * s0 * tau) ** 2
    scale = (-setting.gamma_nu * pref * a01 * a01 / (2.0 * math.pi * s0 * s0)
             * math.exp(2.0 * spec.k - w / (2.0 * s0 * s0 * tau)))
    return first, scale * J, abs(scale) * err


def u_terms(taylor: TaylorTable, spec: CallSpec, setting: IndifferenceSetting,
            epsabs: float = 1e-12) -> PriceExpansion:
    """Second-order indifference price expansion of a call at ``(t, x, y)``."""
    tau = spec.tau
    x, y = setting.x, setting.y
    s0 = taylor.sigma0
    ops = price_operators(taylor)
    u0 = bs_call(spec.t, x, s0, spec.k, spec.T)
    u1 = apply_to_call(ops["u1"], taylor, x, y, spec.k, tau)
    u2_lin = apply_to_call(ops["u2"], taylor, x, y, spec.k, tau)
    first, second, err = _u2_ind_pieces(taylor, spec, setting, epsabs * math.exp(x))
    return PriceExpansion(u0=u0, u1=u1, u2_lin=u2_lin, u2_ind=first + second,
                          u2_ind_eta=first, u2_ind_quad=second, quad_error=err)
