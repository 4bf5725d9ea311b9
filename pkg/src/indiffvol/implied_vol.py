"""Buyer/seller implied-volatility expansion and Black-Scholes inversion.

Two independent routes produce the second-order implied volatility:
the explicit polynomials in ``(tau, L)`` (``iv_terms_closed_form``) and the
generic price-to-vol recursion applied to the operator-engine prices
(``iv_terms_generic`` / ``iv_terms_generic_split``).  They share nothing but
the Taylor table and the ``u2_ind`` time-integral kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

from scipy.special import erfcx, ndtr

from .model_spec import LSVModel, TaylorTable, taylor_table
from .traded_pricing import (
    SQRT_2PI,
    CallSpec,
    IndifferenceSetting,
    PriceExpansion,
    bs_vega,
    indifference_kernel,
    u_terms,
)

SIGMA_MIN, SIGMA_MAX = 1e-8, 5.0


class ImpliedVolError(ValueError):
    """Price outside the no-arbitrage bounds or outside the volatility bracket."""


class VanishingVegaError(ArithmeticError):
    pass


@dataclass(frozen=True)
class IVExpansion:
    sigma0: float
    tau: float
    L: float
    sigma_10: float = 0.0
    sigma_01: float = 0.0
    sigma_20: float = 0.0
    sigma_11: float = 0.0
    sigma_02: float = 0.0
    sigma2_ind: float = 0.0
    # sigma2_ind split into the eta-driven and the gamma_nu-driven piece
    sigma2_ind_eta: float = 0.0
    sigma2_ind_quad: float = 0.0
    split: bool = True

    @property
    def sigma1(self) -> float:
        return self.sigma_10 + self.sigma_01

    @property
    def sigma2_lin(self) -> float:
        return self.sigma_20 + self.sigma_11 + self.sigma_02

    @property
    def sigma2(self) -> float:
        return self.sigma2_lin + self.sigma2_ind

    @property
    def ivbar(self):
        s0 = self.sigma0
        return (s0, s0 + self.sigma1, s0 + self.sigma1 + self.sigma2)

    @property
    def half_spread(self) -> float:
        return abs(self.sigma2_ind_quad)


# --- closed forms -------------------------------------------------------------


def _check_point(taylor: TaylorTable, setting: IndifferenceSetting):
    if taylor.xbar != setting.x or taylor.ybar != setting.y:
        raise ValueError(
            f"explicit implied-vol terms need the expansion point at the current state; "
            f"got ({taylor.xbar}, {taylor.ybar}) vs ({setting.x}, {setting.y})"
        )


def sigma2_ind_quad_term(taylor: TaylorTable, spec: CallSpec, setting: IndifferenceSetting,
                         epsabs: float = 1e-12) -> float:
    """The ``gamma_nu``-signed part of ``Sigma2_ind``; its absolute value is the half-spread."""
    a01, b0, rho = taylor.a[0, 1], taylor.b[0, 0], taylor.rho
    pref = (1.0 - rho * rho) * b0
    if pref == 0.0 or a01 == 0.0 or setting.gamma_nu == 0.0:
        return 0.0
    s0, tau = taylor.sigma0, spec.tau
    L = spec.k - setting.x
    epsabs_eff = epsabs * math.exp(setting.x) / max(abs(setting.gamma_nu), 1.0)
    J, _ = indifference_kernel(L, s0, tau, epsabs=epsabs_eff)
    return (-setting.gamma_nu * pref * a01 * a01 / (s0 * s0 * SQRT_2PI)
            * math.exp(spec.k) / math.sqrt(tau) * J)


def iv_terms_closed_form(taylor: TaylorTable, spec: CallSpec,
                         setting: IndifferenceSetting, literal: bool = False) -> IVExpansion:
    """Explicit second-order implied volatility in ``tau`` and ``L = k - x``.

    With Taylor entries scaled by ``1/(i! j!)`` the terms linear in
    ``a20, a11, a02`` carry twice the weight of the commonly displayed
    polynomials; ``literal=True`` reproduces the displayed weights for
    comparison (see the decisions ledger).
    """
    _check_point(taylor, setting)
    tau = spec.tau
    L = spec.k - setting.x
    s = taylor.sigma0
    a, b, f, g, h = taylor.a, taylor.b, taylor.f, taylor.g, taylor.h
    a10, a01, a20, a11, a02 = a[1, 0], a[0, 1], a[2, 0], a[1, 1], a[0, 2]
    if not literal:
        a20, a11, a02 = 2.0 * a20, 2.0 * a11, 2.0 * a02
    b0, f0, g0 = b[0, 0], f[0, 0], g[0, 0]
    f10, f01, g10, g01 = f[1, 0], f[0, 1], g[1, 0], g[0, 1]
    h01 = h[0, 1]
    s2, s3, s5, s7 = s * s, s**3, s**5, s**7
    t2 = tau * tau
    L2 = L * L

    sig10 = a10 / (2 * s) * L
    sig01 = tau * a01 * (g0 + 2 * f0) / (4 * s) + a01 * g0 / (2 * s3) * L

    sig20 = (tau * (s * a20 / 12 - a10**2 / (8 * s))
             + t2 * (-s * a10**2 / 96)
             + (2 * s2 * a20 - 3 * a10**2) / (12 * s3) * L2)

    sig11 = (tau / (12 * s3) * (s2 * a11 * g0 + a01 * (a10 * g0 - 2 * s2 * g10))
             + t2 / (48 * s) * (-a01 * a10 * g0)
             + tau / (24 * s3) * (2 * s2 * a11 * (g0 + 2 * f0)
                                  + a01 * (2 * s2 * (g10 + 2 * f10) - 5 * a10 * (g0 + 2 * f0))) * L
             + 1 / (6 * s5) * (s2 * a11 * g0 + a01 * (s2 * g10 - 5 * a10 * g0)) * L2)

    sig02 = (tau / (24 * s5) * (4 * s2 * a02 * (3 * s2 * b0 - g0**2)
                                + a01 * (a01 * (9 * g0**2 - 8 * s2 * b0) - 4 * s2 * g0 * g01))
             + t2 / (24 * s3) * (a01 * (-2 * s2 * a01 * b0 + g0 * (s2 * (g01 + 2 * f01) - 3 * a01 * f0))
                                 + a01 * f0 * (2 * s2 * (g01 + 2 * f01) - 3 * a01 * f0)
                                 + s2 * a02 * (g0 + 2 * f0) ** 2)
             + tau / (24 * s5) * (a01 * (g0 * (4 * s2 * (g01 + f01) - 18 * a01 * f0)
                                         - 9 * a01 * g0**2 + 4 * s2 * g01 * f0)
                                  + 4 * s2 * a02 * g0 * (g0 + 2 * f0)) * L
             + 1 / (12 * s7) * (a01 * (a01 * (4 * s2 * b0 - 9 * g0**2) + 2 * s2 * g0 * g01)
                                + 2 * s2 * a02 * g0**2) * L2)

    pref = (1.0 - taylor.rho**2) * b0
    ind_eta = pref * (-2.0 * h01 * a01 * t2) / (3.0 * s)
    ind_quad = sigma2_ind_quad_term(taylor, spec, setting)
    return IVExpansion(sigma0=s, tau=tau, L=L, sigma_10=sig10, sigma_01=sig01,
                       sigma_20=sig20, sigma_11=sig11, sigma_02=sig02,
                       sigma2_ind=ind_eta + ind_quad, sigma2_ind_eta=ind_eta,
                       sigma2_ind_quad=ind_quad)


# --- generic recursion --------------------------------------------------------


def vega_ratio_second(L: float, sigma0: float, tau: float) -> float:
    """``d_sigma^2 u_BS / d_sigma u_BS = L^2/(sigma^3 tau) - sigma tau / 4``."""
    return L * L / (sigma0**3 * tau) - sigma0 * tau / 4.0


def _vega_or_raise(spec: CallSpec, x: float, sigma0: float) -> float:
    vega = bs_vega(spec.t, x, sigma0, spec.k, spec.T)
    if not vega > 1e-300:
        raise VanishingVegaError(
            "Black-Scholes vega underflows at this (tau, L); use iv_terms_closed_form instead"
        )
    return vega


def iv_terms_generic(prices: PriceExpansion, sigma0: float, spec: CallSpec,
                     x: float = 0.0) -> IVExpansion:
    """Price-to-vol recursion for ``m <= 2``; returns only the order totals
    (``sigma_10`` holds ``Sigma1`` and ``sigma_20`` holds the linear ``Sigma2``)."""
    vega = _vega_or_raise(spec, x, sigma0)
    L = spec.k - x
    tau = spec.tau
    sig1 = prices.u1 / vega
    sig2_lin = prices.u2_lin / vega - 0.5 * sig1 * sig1 * vega_ratio_second(L, sigma0, tau)
    return IVExpansion(sigma0=sigma0, tau=tau, L=L, sigma_10=sig1, sigma_20=sig2_lin,
                       sigma2_ind=prices.u2_ind / vega,
                       sigma2_ind_eta=prices.u2_ind_eta / vega,
                       sigma2_ind_quad=prices.u2_ind_quad / vega, split=False)


def _scaled_table(taylor: TaylorTable, ex: float, ey: float) -> TaylorTable:
    upd = {}
    for name in ("a", "b", "f", "g", "h"):
        arr = taylor.coeff(name)
        upd[name] = {(i, j): arr[i, j] * ex**i * ey**j
                     for i in range(3) for j in range(3 - i)}
    return taylor.with_entries(**upd)


def iv_terms_generic_split(taylor: TaylorTable, spec: CallSpec,
                           setting: IndifferenceSetting) -> IVExpansion:
    """Generic recursion with the ``(i, j)`` split recovered by scaling x- and
    y-Taylor entries; each order-2 term is homogeneous of degree 2 in the scales."""
    parts = {}
    for tag, (ex, ey) in {"x": (1.0, 0.0), "y": (0.0, 1.0), "xy": (1.0, 1.0)}.items():
        tab = _scaled_table(taylor, ex, ey)
        pr = u_terms(tab, spec, IndifferenceSetting(0.0, setting.x, setting.y))
        parts[tag] = iv_terms_generic(pr, taylor.sigma0, spec, setting.x)
    full = iv_terms_generic(u_terms(taylor, spec, setting), taylor.sigma0, spec, setting.x)
    s20 = parts["x"].sigma2_lin
    s02 = parts["y"].sigma2_lin
    return IVExpansion(sigma0=taylor.sigma0, tau=spec.tau, L=spec.k - setting.x,
                       sigma_10=parts["x"].sigma1, sigma_01=parts["y"].sigma1,
                       sigma_20=s20, sigma_11=parts["xy"].sigma2_lin - s20 - s02, sigma_02=s02,
                       sigma2_ind=full.sigma2_ind, sigma2_ind_eta=full.sigma2_ind_eta,
                       sigma2_ind_quad=full.sigma2_ind_quad)


def index_sets(m: int, k: int) -> List[tuple]:
    """Compositions ``(i_1, ..., i_k)`` of ``m`` with positive parts."""
    if k == 0:
        return [()] if m == 0 else []
    out = []
    for first in range(1, m - k + 2):
        out.extend((first, *rest) for rest in index_sets(m - first, k - 1))
    return out


def iv_recursion(u: Sequence[float], sigma_derivs: Sequence[float], m_max: int = 2) -> List[float]:
    """General-order recursion
    ``Sigma_m = (u_m - sum_{k=2}^m (1/k!) sum_{I_{m,k}} prod Sigma_{i} d_sigma^k u_BS) / d_sigma u_BS``.

    ``u[m]`` are price terms, ``sigma_derivs[k]`` the k-th sigma-derivative of
    ``u_BS`` at ``sigma0``.  Only ``m_max <= 2`` is enabled since higher price
    terms are not computed.
    """
    if m_max > 2:
        raise NotImplementedError("price terms beyond second order are not available")
    sig = [0.0]
    for m in range(1, m_max + 1):
        acc = u[m]
        for k in range(2, m + 1):
            s = sum(math.prod(sig[i] for i in idx) for idx in index_sets(m, k))
            acc -= s * sigma_derivs[k] / math.factorial(k)
        sig.append(acc / sigma_derivs[1])
    return sig


# --- inversion ----------------------------------------------------------------


def log_otm_price(t, x, sigma, k, T) -> float:
    """Log of the out-of-the-money option value (call if ``k >= x``, else put),
    accurate far into the wings through scaled complementary error functions."""
    tau = T - t
    sq = sigma * math.sqrt(tau)
    dp = (x - k) / sq + 0.5 * sq
    dm = dp - sq
    r2 = math.sqrt(2.0)
    if k >= x:
        if dp >= 0.0:
            return math.log(math.exp(x) * ndtr(dp) - math.exp(k) * ndtr(dm))
        diff = erfcx(-dp / r2) - erfcx(-dm / r2)
        return x - 0.5 * dp * dp + math.log(0.5 * diff)
    if dm <= 0.0:
        return math.log(math.exp(k) * ndtr(-dm) - math.exp(x) * ndtr(-dp))
    diff = erfcx(dm / r2) - erfcx(dp / r2)
    return k - 0.5 * dm * dm + math.log(0.5 * diff)


def _log_vega(t, x, sigma, k, T) -> float:
    tau = T - t
    sq = sigma * math.sqrt(tau)
    dp = (x - k) / sq + 0.5 * sq
    return x - 0.5 * dp * dp - 0.5 * math.log(2 * math.pi) + 0.5 * math.log(tau)


def implied_vol_from_log_otm(log_price: float, t, x, k, T, tol: float = 1e-14,
                             max_iter: int = 200) -> float:
    """Safeguarded Newton on ``log otm(sigma) = log_price`` over ``[1e-8, 5]``."""
    if not T > t:
        raise ValueError("T must exceed t")
    lo, hi = SIGMA_MIN, SIGMA_MAX
    f_lo = log_otm_price(t, x, lo, k, T) - log_price if _finite_log(t, x, lo, k, T) else -math.inf
    f_hi = log_otm_price(t, x, hi, k, T) - log_price
    if f_hi < 0.0:
        raise ImpliedVolError(f"price requires a volatility above the bracket limit {SIGMA_MAX}")
    if f_lo > 0.0:
        raise ImpliedVolError(f"price requires a volatility below the bracket limit {SIGMA_MIN}")
    tau = T - t
    L = abs(k - x)
    # Brenner-Subrahmanyam near the money, wing estimate sqrt(2|L|/tau) otherwise
    seed = math.sqrt(2 * math.pi / tau) * math.exp(log_price - max(x, k))
    seed = max(seed, math.sqrt(2.0 * L / tau))
    sig = min(max(seed, lo), hi)
    for _ in range(max_iter):
        fv = log_otm_price(t, x, sig, k, T) - log_price
        if fv > 0.0:
            hi = sig
        else:
            lo = sig
        if abs(fv) <= tol:
            return sig
        deriv = math.exp(_log_vega(t, x, sig, k, T) - (fv + log_price))
        step = fv / deriv if deriv > 0.0 else math.inf
        new = sig - step
        if not (lo < new < hi) or not math.isfinite(new):
            new = 0.5 * (lo + hi)
        if abs(new - sig) <= 1e-15 * sig:
            return new
        sig = new
        if hi - lo <= 1e-15 * hi:
            return sig
    return sig


def _finite_log(t, x, sigma, k, T) -> bool:
    try:
        return math.isfinite(log_otm_price(t, x, sigma, k, T))
    except (ValueError, OverflowError):
        return False


def implied_vol_invert(price: float, t, x, k, T) -> float:
    """Black-Scholes implied volatility of a call price."""
    ex, ek = math.exp(x), math.exp(k)
    intrinsic = max(ex - ek, 0.0)
    if not price > intrinsic:
        raise ImpliedVolError(f"price {price!r} is not above the lower bound (e^x - e^k)^+ = {intrinsic!r}")
    if not price < ex:
        raise ImpliedVolError(f"price {price!r} is not below the upper bound e^x = {ex!r}")
    otm = price - intrinsic
    return implied_vol_from_log_otm(math.log(otm), t, x, k, T)


# --- surfaces -----------------------------------------------------------------

SURFACE_COLUMNS = ("k", "T", "L", "side", "sigma0", "sigma1", "sigma2_lin", "sigma2_ind",
                   "ivbar2", "half_spread")


@dataclass
class SurfaceRow:
    k: float
    T: float
    L: float
    side: str
    sigma0: float = float("nan")
    sigma1: float = float("nan")
    sigma2_lin: float = float("nan")
    sigma2_ind: float = float("nan")
    ivbar2: float = float("nan")
    half_spread: float = float("nan")
    error: Optional[str] = None

    def as_tuple(self):
        return tuple(getattr(self, c) for c in SURFACE_COLUMNS)


def surface_point(model: LSVModel, setting: IndifferenceSetting, k: float, T: float,
                  t: float = 0.0, table: Optional[TaylorTable] = None) -> SurfaceRow:
    row = SurfaceRow(k=k, T=T, L=k - setting.x, side=setting.side)
    try:
        tab = table if table is not None else taylor_table(model, setting.x, setting.y)
        iv = iv_terms_closed_form(tab, CallSpec(k=k, T=T, t=t), setting)
        row.sigma0, row.sigma1 = iv.sigma0, iv.sigma1
        row.sigma2_lin, row.sigma2_ind = iv.sigma2_lin, iv.sigma2_ind
        row.ivbar2 = iv.ivbar[2]
        row.half_spread = iv.half_spread
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def surface(model: LSVModel, setting: IndifferenceSetting, strikes: Sequence[float],
            maturities: Sequence[float], side: str = "buyer", t: float = 0.0,
            table: Optional[TaylorTable] = None) -> List[SurfaceRow]:
    """Second-order implied volatility over a strike x maturity grid.

    ``side`` fixes the sign of ``gamma_nu`` (buyer positive, seller negative).
    """
    if side not in ("buyer", "seller"):
        raise ValueError(f"side must be buyer or seller, got {side!r}")
    gn = abs(setting.gamma_nu) * (1.0 if side == "buyer" else -1.0)
    st = IndifferenceSetting(gn, setting.x, setting.y)
    tab = table
    if tab is None:
        tab = taylor_table(model, setting.x, setting.y)
    return [surface_point(model, st, k, T, t=t, table=tab) for T in maturities for k in strikes]
