"""Indifference prices of claims written on the non-traded factor ``Y``.

The distortion ``psi = log(xi) / (1 - rho^2)`` turns the nonlinear pricing
equation into the linear Cauchy problem

    (d_t + A - (1 - rho^2) h) xi = 0,   xi(T, y) = theta(y) = exp(-gamma_nu (1 - rho^2) phi(y)),

which is expanded exactly like the traded problem.  ``eta`` is the same
pipeline with ``theta = 1``, and ``u = (eta - psi) / gamma_nu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

from .model_spec import LSVModel, TaylorTable, taylor_table
from .operator_engine import (
    MAX_DERIVATIVE_ORDER,
    WeylElement,
    compose,
    g_operator,
    time_integral,
)

TRAPEZOID_NODES = 4096
TRAPEZOID_WIDTH = 8.0  # standard deviations on each side


class NonTradedError(ValueError):
    pass


# --- payoffs and distortion ---------------------------------------------------


@dataclass(frozen=True)
class PayoffY:
    """Bounded payoff ``phi(y) + offset``; build with :meth:`call_spread` or :meth:`custom`."""

    kind: str
    k1: float = float("nan")
    k2: float = float("nan")
    func: Optional[Callable] = None
    bound: float = float("nan")
    offset: float = 0.0

    @classmethod
    def call_spread(cls, k1: float, k2: float) -> "PayoffY":
        if not k1 < k2:
            raise ValueError(f"call spread needs k1 < k2, got k1={k1}, k2={k2}")
        return cls(kind="call-spread", k1=k1, k2=k2, bound=k2 - k1)

    @classmethod
    def custom(cls, func: Callable, bound: float) -> "PayoffY":
        """``func`` must accept numpy arrays and satisfy ``|func| <= bound``."""
        if not (bound >= 0.0 and math.isfinite(bound)):
            raise ValueError("custom payoffs must be bounded (finite sup-norm bound)")
        return cls(kind="custom", func=func, bound=bound)

    @classmethod
    def zero(cls) -> "PayoffY":
        return cls.custom(lambda y: 0.0 * np.asarray(y, dtype=float), 0.0)

    def shifted(self, c: float) -> "PayoffY":
        return replace(self, offset=self.offset + c, bound=self.bound + abs(c))

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "call-spread":
            return np.clip(y - self.k1, 0.0, self.k2 - self.k1) + self.offset
        return self.func(y) + self.offset


@dataclass(frozen=True)
class DistortedTerminal:
    """``theta(y) = exp(-gamma_nu (1 - rho^2) phi(y))``.

    ``pieces`` lists ``(left, right, alpha, beta)`` with
    ``theta = exp(alpha + beta*y)`` on ``[left, right)`` when the payoff is
    piecewise linear; otherwise ``pieces`` is None and ``func`` is used.
    """

    func: Callable
    pieces: Optional[Tuple[Tuple[float, float, float, float], ...]] = None
    is_one: bool = False

    def __call__(self, y):
        return self.func(np.asarray(y, dtype=float))


def distorted_terminal(payoff: PayoffY, gamma_nu: float, rho: float) -> DistortedTerminal:
    if rho * rho >= 1.0:
        raise NonTradedError(
            "the distortion degenerates at rho^2 = 1; the market is complete and the "
            "price is the linear expectation"
        )
    c = gamma_nu * (1.0 - rho * rho)
    if c == 0.0 or (payoff.kind == "custom" and payoff.bound == 0.0 and payoff.offset == 0.0):
        return DistortedTerminal(func=lambda y: np.ones_like(y), pieces=((-np.inf, np.inf, 0.0, 0.0),),
                                 is_one=True)
    if payoff.kind == "call-spread":
        k1, k2 = payoff.k1, payoff.k2
        shift = payoff.offset
        pieces = (
            (-np.inf, k1, -c * shift, 0.0),
            (k1, k2, c * k1 - c * shift, -c),
            (k2, np.inf, -c * (k2 - k1) - c * shift, 0.0),
        )
    else:
        pieces = None

    def func(y):
        return np.exp(-c * payoff(y))

    return DistortedTerminal(func=func, pieces=pieces)


# --- Gaussian smoothing with derivatives ---------------------------------------


def _hermite_e(n: int, z):
    """Probabilists' Hermite polynomial He_n."""
    h_prev, h = np.ones_like(z), z
    if n == 0:
        return h_prev
    for k in range(1, n):
        h_prev, h = h, z * h - k * h_prev
    return h


def _normal_pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def smoothed_derivatives(theta: DistortedTerminal, mean: float, sd: float,
                         nmax: int = MAX_DERIVATIVE_ORDER) -> np.ndarray:
    """``d^n/dm^n E[theta(m + sd Z)]`` at ``m = mean`` for ``n = 0..nmax``."""
    out = np.zeros(nmax + 1)
    if theta.pieces is not None:
        for left, right, alpha, beta in theta.pieces:
            out += _piece_derivatives(left, right, alpha, beta, mean, sd, nmax)
        return out
    if sd == 0.0:
        raise NonTradedError("custom payoffs need a non-degenerate factor (b0 > 0)")
    z = np.linspace(-TRAPEZOID_WIDTH, TRAPEZOID_WIDTH, TRAPEZOID_NODES)
    w = np.full(z.size, z[1] - z[0])
    w[0] = w[-1] = 0.5 * (z[1] - z[0])
    base = w * _normal_pdf(z) * theta(mean + sd * z)
    for n in range(nmax + 1):
        out[n] = np.sum(base * _hermite_e(n, z)) / sd**n
    return out


def _piece_derivatives(left, right, alpha, beta, m, s, nmax):
    """Derivatives in ``m`` of ``E[exp(alpha + beta W) 1{left <= W < right}]``, ``W ~ N(m, s^2)``."""
    out = np.zeros(nmax + 1)
    if s == 0.0:
        if left <= m < right:
            val = math.exp(alpha + beta * m)
            out[:] = [val * beta**n for n in range(nmax + 1)]
        return out
    E = math.exp(alpha + beta * m + 0.5 * beta * beta * s * s)
    shift = m + beta * s * s
    # D^(j) of Phi(zr) - Phi(zl), z = (bound - shift)/s, dz/dm = -1/s
    D = np.zeros(nmax + 1)
    for bound, sign in ((right, 1.0), (left, -1.0)):
        if math.isinf(bound):
            if bound > 0 and sign > 0:
                D[0] += 1.0
            continue
        zb = (bound - shift) / s
        D[0] += sign * ndtr(zb)
        phi = _normal_pdf(zb)
        for j in range(1, nmax + 1):
            # d^j/dm^j Phi(z) = (-1/s)^j phi^{(j-1)}(z) = (-1/s)^j (-1)^{j-1} He_{j-1}(z) phi(z)
            D[j] += sign * (-1.0 / s) ** j * (-1.0) ** (j - 1) * _hermite_e(j - 1, zb) * phi
    for n in range(nmax + 1):
        out[n] = E * sum(math.comb(n, j) * beta ** (n - j) * D[j] for j in range(n + 1))
    return out


# --- xi expansion -------------------------------------------------------------


def _table_key(taylor: TaylorTable):
    return (taylor.xbar, taylor.ybar, taylor.rho,
            *(tuple(taylor.coeff(n).ravel()) for n in ("a", "b", "f", "g", "h")))


def _drop_x(op: WeylElement) -> WeylElement:
    # x-derivatives annihilate functions of y and, for y-only b, f, h, never
    # meet an (x - xbar) factor that could lower their order
    return WeylElement({k: v for k, v in op if k[5] == 0})


@lru_cache(maxsize=256)
def _xi_operators(key) -> Tuple[WeylElement, WeylElement]:
    xbar, ybar, rho = key[:3]
    arrays = {n: np.array(v).reshape(3, 3) for n, v in zip(("a", "b", "f", "g", "h"), key[3:])}
    taylor = TaylorTable(xbar=xbar, ybar=ybar, rho=rho, **arrays)
    kill = 1.0 - rho * rho
    g1 = _drop_x(g_operator(1, taylor, var=1, killing=kill))
    g1_inner = _drop_x(g_operator(1, taylor, var=2, killing=kill))
    g2 = _drop_x(g_operator(2, taylor, var=1, killing=kill))
    l1 = time_integral(g1, 1)
    l2 = time_integral(g2, 1) + time_integral(compose(g1, g1_inner), 2)
    return l1, l2


@dataclass
class XiExpansion:
    """``xi_0 .. xi_m`` of the linear problem as functions of ``y`` (with ``x`` irrelevant)."""

    taylor: TaylorTable
    theta: DistortedTerminal
    tau: float
    m: int
    operators: Tuple[WeylElement, ...] = field(default_factory=tuple)

    def xi0_derivatives(self, y: float) -> np.ndarray:
        tab = self.taylor
        kill = 1.0 - tab.rho**2
        mean = y + tab.f[0, 0] * self.tau
        sd = math.sqrt(2.0 * tab.b[0, 0] * self.tau)
        return math.exp(-self.tau * kill * tab.h[0, 0]) * smoothed_derivatives(self.theta, mean, sd)

    def values(self, y: float) -> np.ndarray:
        d = self.xi0_derivatives(y)
        out = [d[0]]
        for op in self.operators[: self.m]:
            out.append(op.at_time(tau=self.tau).apply(
                lambda i, j: d[j] if i == 0 else 0.0, self.taylor.xbar, y,
                self.taylor.xbar, self.taylor.ybar))
        return np.array(out, dtype=float)

    @property
    def xi_terms(self) -> List[Callable[[float], float]]:
        return [lambda y, n=n: self.values(y)[n] for n in range(self.m + 1)]


def xi_expansion(taylor: TaylorTable, theta: DistortedTerminal, t: float, T: float,
                 m: int = 2) -> XiExpansion:
    if m not in (0, 1, 2):
        raise NonTradedError(f"order m must be 0, 1 or 2, got {m}")
    if not taylor.is_y_only(("b", "f", "h")):
        raise NonTradedError("the non-traded expansion needs b, f and h to depend on y only")
    tau = T - t
    if not tau > 0.0:
        raise ValueError("T must exceed t")
    ops = _xi_operators(_table_key(taylor)) if m > 0 else ()
    return XiExpansion(taylor=taylor, theta=theta, tau=tau, m=m, operators=tuple(ops))


# --- psi and prices -----------------------------------------------------------


def log_series(ratios: Sequence[float]) -> List[float]:
    """Order-by-order terms of ``log(1 + sum_k eps^k r_k)`` up to the length of ``ratios``."""
    m = len(ratios)
    out = [0.0] * (m + 1)
    # log(1 + s) = sum_j (-1)^{j+1} s^j / j ; collect eps powers via a polynomial product
    s = np.zeros(m + 1)
    s[1:] = ratios
    power = np.zeros(m + 1)
    power[0] = 1.0
    for j in range(1, m + 1):
        power = np.convolve(power, s)[: m + 1]
        for n in range(1, m + 1):
            out[n] += (-1.0) ** (j + 1) * power[n] / j
    return out


@dataclass(frozen=True)
class PsiExpansion:
    psi_terms: Tuple[float, ...]
    eta_terms: Tuple[float, ...]
    gamma_nu: float

    @property
    def ubar(self) -> Tuple[float, ...]:
        out = []
        eb = pb = 0.0
        for e, p in zip(self.eta_terms, self.psi_terms):
            eb += e
            pb += p
            out.append((eb - pb) / self.gamma_nu)
        return tuple(out)


def _psi_from_xi(vals: np.ndarray, rho: float) -> Tuple[float, ...]:
    if not vals[0] > 0.0:
        raise NonTradedError(f"xi_0 = {vals[0]!r} is not positive; quadrature broke down")
    kill = 1.0 - rho * rho
    ratios = [v / vals[0] for v in vals[1:]]
    series = log_series(ratios)
    return tuple([math.log(vals[0]) / kill] + [series[n] / kill for n in range(1, len(vals))])


def psi_expansion(xi: XiExpansion, rho: float, y: float,
                  eta_xi: Optional[XiExpansion] = None, gamma_nu: float = 1.0) -> PsiExpansion:
    """``psi_m`` at ``y`` from ``xi``; ``eta_m`` from ``eta_xi`` (theta = 1)."""
    psi = _psi_from_xi(xi.values(y), rho)
    if eta_xi is None:
        eta_xi = XiExpansion(taylor=xi.taylor, theta=distorted_terminal(PayoffY.zero(), 0.0, rho),
                             tau=xi.tau, m=xi.m, operators=xi.operators)
    eta = _psi_from_xi(eta_xi.values(y), rho)
    return PsiExpansion(psi_terms=psi, eta_terms=eta, gamma_nu=gamma_nu)


def nontraded_expansion(model: LSVModel, payoff: PayoffY, gamma_nu: float, t: float, y: float,
                        T: float, m: int = 2, table: Optional[TaylorTable] = None) -> PsiExpansion:
    """Expansion at ``y`` with the expansion point ``(0, y)`` unless ``table`` is given."""
    if gamma_nu == 0.0:
        raise NonTradedError("gamma_nu must be non-zero for an indifference price")
    tab = table if table is not None else taylor_table(model, 0.0, y)
    theta = distorted_terminal(payoff, gamma_nu, tab.rho)
    xi = xi_expansion(tab, theta, t, T, m)
    return psi_expansion(xi, tab.rho, y, gamma_nu=gamma_nu)


def nontraded_price(model: LSVModel, payoff: PayoffY, gamma_nu: float, t: float, y: float,
                    T: float, m: int = 2) -> float:
    """``ubar_m(t, y) = (etabar_m - psibar_m) / gamma_nu``."""
    return nontraded_expansion(model, payoff, gamma_nu, t, y, T, m).ubar[m]


# --- convergence probe --------------------------------------------------------


@dataclass
class ProbeResult:
    m: int
    taus: List[float]
    errors: List[float]
    oracle_errors: List[float]
    slope: float
    flagged: bool
    note: str = ""


def fit_slope(taus: Sequence[float], errors: Sequence[float]) -> float:
    lt, le = np.log(np.asarray(taus)), np.log(np.asarray(errors))
    return float(np.polyfit(lt, le, 1)[0])


def convergence_order_probe(model: LSVModel, payoff: PayoffY, gamma_nu: float, y: float,
                            taus: Sequence[float], m: int, y_grid: Optional[Sequence[float]] = None,
                            oracle=None) -> ProbeResult:
    """Least-squares slope of ``log sup_y |u - ubar_m|`` against ``log tau``.

    ``oracle(tau, ys)`` returns ``(u, err)`` arrays on ``ys``; by default the
    1-D Crank-Nicolson solver with Richardson refinement is used.
    """
    taus = list(taus)
    if len(taus) < 4 or any(b >= a for a, b in zip(taus, taus[1:])):
        raise ValueError("taus must be strictly decreasing with at least 4 points")
    if oracle is None:
        from .oracles.fd import nontraded_price_fd

        def oracle(tau, ys):
            return nontraded_price_fd(model, payoff, gamma_nu, tau, ys)
    errs, oerrs = [], []
    flagged = False
    for tau in taus:
        ys = np.asarray(y_grid if y_grid is not None else [y], dtype=float)
        u, uerr = oracle(tau, ys)
        approx = np.array([nontraded_price(model, payoff, gamma_nu, 0.0, yy, tau, m) for yy in ys])
        diff = np.abs(u - approx)
        i = int(np.argmax(diff))
        errs.append(float(diff[i]))
        oerrs.append(float(np.max(uerr)))
        if np.max(uerr) > 0.1 * diff[i]:
            flagged = True
    note = "oracle error exceeds 10% of the measured error at some tau" if flagged else ""
    return ProbeResult(m=m, taus=taus, errors=errs, oracle_errors=oerrs,
                       slope=fit_slope(taus, errs), flagged=flagged, note=note)
