"""Normal-ordered differential operators with polynomial coefficients.

A :class:`WeylElement` is a finite sum of monomials

    c * tau^r0 * s1^r1 * s2^r2 * (x - xbar)^p (y - ybar)^q * d_x^i d_y^j

with every multiplication factor standing to the left of every derivative.
``s1 = t1 - t`` and ``s2 = t2 - t`` are the elapsed times of the (at most two)
nested time integrals and ``tau = T - t``.  Time integrals over the simplex
``0 <= s1 <= s2 <= tau`` map ``s``-monomials to ``tau``-monomials exactly.

The module also carries the Gaussian semigroup of the frozen-coefficient
operator, the shift operators ``X(t, t1)``, ``Y(t, t1)`` that reproduce
Gaussian moments, and the Hermite reduction of Black-Scholes x-derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from .model_spec import TaylorTable

MAX_DERIVATIVE_ORDER = 6
N_TIME_VARS = 3  # tau, s1, s2

Key = Tuple[int, int, int, int, int, int, int]  # (r0, r1, r2, p, q, i, j)


class OperatorOrderError(ValueError):
    pass


class QuadratureError(RuntimeError):
    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(f"{message} (estimate={estimate!r}, error={error!r})")
        self.estimate = estimate
        self.error = error


def _falling(n: int, k: int) -> int:
    out = 1
    for m in range(n - k + 1, n + 1):
        out *= m
    return out


class WeylElement:
    """Immutable normal-ordered operator; see module docstring for the term layout."""

    __slots__ = ("_terms",)

    def __init__(self, terms: Optional[Dict[Key, float]] = None):
        clean = {}
        for k, v in (terms or {}).items():
            if v != 0.0:
                if len(k) != 7:
                    raise ValueError(f"bad term key {k}")
                if k[5] + k[6] > MAX_DERIVATIVE_ORDER:
                    raise OperatorOrderError(
                        f"derivative order {k[5] + k[6]} exceeds the cap {MAX_DERIVATIVE_ORDER}"
                    )
                clean[k] = float(v)
        self._terms = clean

    # construction helpers
    @classmethod
    def monomial(cls, coeff=1.0, p=0, q=0, i=0, j=0, time=(0, 0, 0)) -> "WeylElement":
        return cls({(*time, p, q, i, j): coeff})

    @classmethod
    def identity(cls) -> "WeylElement":
        return cls.monomial(1.0)

    @classmethod
    def zero(cls) -> "WeylElement":
        return cls()

    @property
    def terms(self) -> Dict[Key, float]:
        return dict(self._terms)

    def __iter__(self):
        return iter(self._terms.items())

    def __len__(self):
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def max_order(self) -> int:
        return max((k[5] + k[6] for k in self._terms), default=0)

    # algebra
    def __add__(self, other: "WeylElement") -> "WeylElement":
        out = dict(self._terms)
        for k, v in other._terms.items():
            out[k] = out.get(k, 0.0) + v
        return WeylElement(out)

    def __neg__(self) -> "WeylElement":
        return WeylElement({k: -v for k, v in self._terms.items()})

    def __sub__(self, other: "WeylElement") -> "WeylElement":
        return self + (-other)

    def scale(self, c: float) -> "WeylElement":
        return WeylElement({k: c * v for k, v in self._terms.items()})

    def __rmul__(self, c: float) -> "WeylElement":
        return self.scale(c)

    def __matmul__(self, other: "WeylElement") -> "WeylElement":
        return compose(self, other)

    def __eq__(self, other) -> bool:
        return isinstance(other, WeylElement) and self._terms == other._terms

    def __hash__(self):
        return hash(frozenset(self._terms.items()))

    def isclose(self, other: "WeylElement", atol: float = 1e-13) -> bool:
        diff = (self - other)._terms
        return all(abs(v) <= atol for v in diff.values())

    def times_time_poly(self, poly: Dict[Tuple[int, int, int], float]) -> "WeylElement":
        """Multiply by a scalar polynomial in (tau, s1, s2)."""
        out: Dict[Key, float] = {}
        for (r0, r1, r2), c in poly.items():
            for k, v in self._terms.items():
                nk = (k[0] + r0, k[1] + r1, k[2] + r2, *k[3:])
                out[nk] = out.get(nk, 0.0) + c * v
        return WeylElement(out)

    def drop_y_derivatives(self) -> "WeylElement":
        """Terms surviving when acting on a function independent of y."""
        return WeylElement({k: v for k, v in self._terms.items() if k[6] == 0})

    def at_time(self, tau: float = 0.0, s1: float = 0.0, s2: float = 0.0) -> "WeylElement":
        """Substitute numeric times, leaving a time-free element."""
        out: Dict[Key, float] = {}
        for k, v in self._terms.items():
            w = v * tau ** k[0] * s1 ** k[1] * s2 ** k[2]
            nk = (0, 0, 0, *k[3:])
            out[nk] = out.get(nk, 0.0) + w
        return WeylElement(out)

    def apply(self, derivs: Callable[[int, int], complex], x: float, y: float,
              xbar: float, ybar: float):
        """Apply a time-free element to F at (x, y); ``derivs(i, j)`` = d_x^i d_y^j F(x, y)."""
        dx, dy = x - xbar, y - ybar
        total = 0.0
        cache: Dict[Tuple[int, int], complex] = {}
        for k, v in self._terms.items():
            if k[0] or k[1] or k[2]:
                raise ValueError("apply() needs a time-free element; call at_time() first")
            ij = (k[5], k[6])
            if ij not in cache:
                cache[ij] = derivs(*ij)
            total = total + v * dx ** k[3] * dy ** k[4] * cache[ij]
        return total

    def apply_to_one(self, x: float, y: float, xbar: float, ybar: float) -> float:
        return self.apply(lambda i, j: 1.0 if i == 0 and j == 0 else 0.0, x, y, xbar, ybar)

    def dump(self) -> str:
        """Sorted text form, one term per line."""
        lines = []
        for k in sorted(self._terms):
            r0, r1, r2, p, q, i, j = k
            lines.append(
                f"{self._terms[k]:.17g} * tau^{r0} dt1^{r1} dt2^{r2} * X^{p} Y^{q} Dx^{i} Dy^{j}"
            )
        return "\n".join(lines)

    def __repr__(self):
        return f"WeylElement({len(self._terms)} terms)"


def compose(lhs: WeylElement, rhs: WeylElement) -> WeylElement:
    """Normal-ordered product ``lhs o rhs`` (derivatives of lhs pass through rhs by Leibniz)."""
    out: Dict[Key, float] = {}
    for ka, ca in lhs._terms.items():
        ra0, ra1, ra2, pa, qa, ia, ja = ka
        for kb, cb in rhs._terms.items():
            rb0, rb1, rb2, pb, qb, ib, jb = kb
            base = ca * cb
            for a in range(min(ia, pb) + 1):
                fa = math.comb(ia, a) * _falling(pb, a)
                for b in range(min(ja, qb) + 1):
                    fb = math.comb(ja, b) * _falling(qb, b)
                    key = (ra0 + rb0, ra1 + rb1, ra2 + rb2, pa + pb - a, qa + qb - b,
                           ia - a + ib, ja - b + jb)
                    out[key] = out.get(key, 0.0) + base * fa * fb
    return WeylElement(out)


def power(op: WeylElement, n: int) -> WeylElement:
    out = WeylElement.identity()
    for _ in range(n):
        out = compose(out, op)
    return out


D_X = WeylElement.monomial(i=1)
D_Y = WeylElement.monomial(j=1)
X_MINUS_XBAR = WeylElement.monomial(p=1)
Y_MINUS_YBAR = WeylElement.monomial(q=1)
DXX_MINUS_DX = WeylElement({(0, 0, 0, 0, 0, 2, 0): 1.0, (0, 0, 0, 0, 0, 1, 0): -1.0})
D_XY = WeylElement.monomial(i=1, j=1)
D_YY = WeylElement.monomial(j=2)


def _time(var: int, power_: int = 1) -> Tuple[int, int, int]:
    t = [0, 0, 0]
    t[var] = power_
    return tuple(t)


def shift_operator_x(taylor: TaylorTable, var: int = 1) -> WeylElement:
    """``X(t, t1) - xbar = (x - xbar) + dt*(-a0 + 2 a0 d_x + g0 d_y)`` with dt = time variable ``var``."""
    a0, g0 = taylor.a[0, 0], taylor.g[0, 0]
    t = _time(var)
    return WeylElement({
        (0, 0, 0, 1, 0, 0, 0): 1.0,
        (*t, 0, 0, 0, 0): -a0,
        (*t, 0, 0, 1, 0): 2.0 * a0,
        (*t, 0, 0, 0, 1): g0,
    })


def shift_operator_y(taylor: TaylorTable, var: int = 1) -> WeylElement:
    """``Y(t, t1) - ybar = (y - ybar) + dt*(f0 + 2 b0 d_y + g0 d_x)``."""
    b0, f0, g0 = taylor.b[0, 0], taylor.f[0, 0], taylor.g[0, 0]
    t = _time(var)
    return WeylElement({
        (0, 0, 0, 0, 1, 0, 0): 1.0,
        (*t, 0, 0, 0, 0): f0,
        (*t, 0, 0, 0, 1): 2.0 * b0,
        (*t, 0, 0, 1, 0): g0,
    })


def polynomial_of(entries: Dict[Tuple[int, int], float], xop: WeylElement,
                  yop: WeylElement) -> WeylElement:
    """``sum c_pq xop^p yop^q`` for commuting ``xop``, ``yop``."""
    out = WeylElement.zero()
    for (p, q), c in entries.items():
        if c == 0.0:
            continue
        out = out + compose(power(xop, p), power(yop, q)).scale(c)
    return out


def coefficient_operator(taylor: TaylorTable, name: str, n: int,
                         var: Optional[int] = 1) -> WeylElement:
    """``chi_n`` as an operator: ``chi_n(X(t,t1), Y(t,t1))``, or plain multiplication if ``var`` is None."""
    entries = taylor.order_part(name, n)
    if var is None:
        return WeylElement({(0, 0, 0, p, q, 0, 0): c for (p, q), c in entries.items()})
    return polynomial_of(entries, shift_operator_x(taylor, var), shift_operator_y(taylor, var))


def _assemble(taylor: TaylorTable, n: int, var: Optional[int], killing: float) -> WeylElement:
    parts = [
        ("a", DXX_MINUS_DX),
        ("f", D_Y),
        ("b", D_YY),
        ("g", D_XY),
    ]
    out = WeylElement.zero()
    for name, deriv in parts:
        coeff = coefficient_operator(taylor, name, n, var)
        if not coeff.is_zero():
            out = out + compose(coeff, deriv)
    if killing:
        out = out - coefficient_operator(taylor, "h", n, var).scale(killing)
    return out


def a_operator(n: int, taylor: TaylorTable, killing: float = 0.0) -> WeylElement:
    """The order-n generator piece ``A_n`` with polynomial coefficients in (x - xbar, y - ybar).

    ``killing`` adds the zeroth-order term ``-killing * h_n`` (used by the
    distorted non-traded problem with ``killing = 1 - rho^2``).
    """
    return _assemble(taylor, n, None, killing)


def g_operator(n: int, taylor: TaylorTable, var: int = 1, killing: float = 0.0) -> WeylElement:
    """``G_n(t, t1) = A_n(X(t, t1), Y(t, t1))`` in the time variable ``var``."""
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2, got {n}")
    return _assemble(taylor, n, var, killing)


def simplex_weight(r1: int, r2: int, depth: int) -> Tuple[float, int]:
    """Integral of ``s1^r1 s2^r2`` over the depth-simplex, as (coefficient, tau power)."""
    if depth == 1:
        if r2:
            raise ValueError("depth-1 integral of an element that depends on s2")
        return 1.0 / (r1 + 1), r1 + 1
    if depth == 2:
        return 1.0 / ((r1 + 1) * (r1 + r2 + 2)), r1 + r2 + 2
    raise ValueError(f"depth must be 1 or 2, got {depth}")


def time_integral(op: WeylElement, depth: int) -> WeylElement:
    """Exact integral over ``t <= t1 (<= t2) <= T``; the result depends on tau only."""
    out: Dict[Key, float] = {}
    for k, v in op:
        w, tp = simplex_weight(k[1], k[2], depth)
        nk = (k[0] + tp, 0, 0, *k[3:])
        out[nk] = out.get(nk, 0.0) + v * w
    return WeylElement(out)


# --- Gaussian semigroup -----------------------------------------------------


@dataclass(frozen=True)
class GaussianKernel:
    """Transition law of the frozen-coefficient diffusion over ``elapsed`` time.

    x-drift is ``-a0`` and y-drift ``f0`` per unit time; covariance rate
    ``[[2 a0, g0], [g0, 2 b0]]``.
    """

    a0: float
    b0: float
    f0: float
    g0: float
    elapsed: float

    @classmethod
    def from_table(cls, taylor: TaylorTable, elapsed: float) -> "GaussianKernel":
        return cls(taylor.a[0, 0], taylor.b[0, 0], taylor.f[0, 0], taylor.g[0, 0], elapsed)

    def __post_init__(self):
        if not self.elapsed > 0.0:
            raise ValueError("elapsed time must be positive")
        if self.g0**2 > 4.0 * self.a0 * self.b0 * (1.0 + 1e-12) + 1e-300:
            raise ValueError("covariance matrix is not positive semi-definite")

    @property
    def covariance(self) -> np.ndarray:
        s = self.elapsed
        return s * np.array([[2.0 * self.a0, self.g0], [self.g0, 2.0 * self.b0]])

    @property
    def drift(self) -> np.ndarray:
        return self.elapsed * np.array([-self.a0, self.f0])

    def mgf(self, alpha: complex, beta: complex) -> complex:
        """``E[exp(alpha*dX + beta*dY)]`` over the elapsed time."""
        m = self.drift
        c = self.covariance
        quad = alpha * alpha * c[0, 0] + 2 * alpha * beta * c[0, 1] + beta * beta * c[1, 1]
        return np.exp(alpha * m[0] + beta * m[1] + 0.5 * quad)

    def factor(self) -> np.ndarray:
        w, v = np.linalg.eigh(self.covariance)
        return v * np.sqrt(np.clip(w, 0.0, None))


_GH_CACHE: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}


def _gauss_hermite(n: int):
    if n not in _GH_CACHE:
        z, w = np.polynomial.hermite_e.hermegauss(n)
        _GH_CACHE[n] = (z, w / math.sqrt(2.0 * math.pi))
    return _GH_CACHE[n]


def gaussian_expectation(kernel: GaussianKernel, func: Callable, x: float, y: float,
                         tol: float = 1e-12, start: int = 8, max_order: int = 256):
    """``E[func(x + dX, y + dY)]`` by tensor Gauss-Hermite with order doubling.

    ``func`` must accept numpy arrays.  Stops once two successive orders agree
    to ``tol`` (absolute).
    """
    L = kernel.factor()
    m = kernel.drift
    prev = None
    n = start
    while n <= max_order:
        z, w = _gauss_hermite(n)
        Z1, Z2 = np.meshgrid(z, z, indexing="ij")
        W = np.outer(w, w)
        X1 = x + m[0] + L[0, 0] * Z1 + L[0, 1] * Z2
        Y1 = y + m[1] + L[1, 0] * Z1 + L[1, 1] * Z2
        val = np.sum(W * func(X1, Y1))
        if prev is not None and abs(val - prev) < tol:
            return val
        prev = val
        n *= 2
    raise QuadratureError("Gauss-Hermite did not converge", estimate=prev,
                          error=float("nan"))


def semigroup_apply(kernel: GaussianKernel, f, x: float, y: float,
                    xbar: float = 0.0, ybar: float = 0.0, tol: float = 1e-12):
    """``P0(t, t1) f`` at ``(x, y)``.

    A :class:`WeylElement` without derivatives is treated as the polynomial
    ``sum c (x - xbar)^p (y - ybar)^q`` and evaluated exactly through the
    shift operators; any other callable goes through Gauss-Hermite quadrature.
    """
    if isinstance(f, WeylElement):
        if any(k[5] or k[6] or k[0] or k[1] or k[2] for k, _ in f):
            raise ValueError("polynomial argument must be a time-free multiplication operator")
        table = TaylorTable.constant(a=kernel.a0, b=kernel.b0, f=kernel.f0, g=kernel.g0,
                                     xbar=xbar, ybar=ybar)
        xop = shift_operator_x(table, var=1)
        yop = shift_operator_y(table, var=1)
        entries = {(k[3], k[4]): v for k, v in f}
        op = polynomial_of(entries, xop, yop).at_time(s1=kernel.elapsed)
        return op.apply_to_one(x, y, xbar, ybar)
    return gaussian_expectation(kernel, f, x, y, tol=tol)


# --- commutation check ------------------------------------------------------


class ExpTestFunction:
    """``Re(weight * exp(alpha*x + beta*y))`` with complex ``alpha``, ``beta`` allowed."""

    def __init__(self, alpha: complex, beta: complex, weight: complex = 1.0):
        self.alpha, self.beta, self.weight = alpha, beta, weight

    def __call__(self, x, y):
        return np.real(self.weight * np.exp(self.alpha * x + self.beta * y))

    def derivative(self, i: int, j: int, x, y):
        return np.real(self.weight * self.alpha**i * self.beta**j * np.exp(self.alpha * x + self.beta * y))

    def semigroup_derivative(self, kernel: GaussianKernel, i: int, j: int, x, y):
        m = kernel.mgf(self.alpha, self.beta)
        return np.real(self.weight * m * self.alpha**i * self.beta**j
                       * np.exp(self.alpha * x + self.beta * y))


class PolyTestFunction:
    """Polynomial ``sum c (x - xbar)^p (y - ybar)^q`` given as ``{(p, q): c}``."""

    def __init__(self, coeffs: Dict[Tuple[int, int], float], xbar: float = 0.0, ybar: float = 0.0):
        self.coeffs = coeffs
        self.xbar, self.ybar = xbar, ybar
        self.element = WeylElement({(0, 0, 0, p, q, 0, 0): c for (p, q), c in coeffs.items()})

    def __call__(self, x, y):
        return sum(c * (x - self.xbar) ** p * (y - self.ybar) ** q for (p, q), c in self.coeffs.items())

    def derivative(self, i: int, j: int, x, y):
        out = 0.0 * x
        for (p, q), c in self.coeffs.items():
            if i <= p and j <= q:
                out = out + c * _falling(p, i) * _falling(q, j) * (x - self.xbar) ** (p - i) * (y - self.ybar) ** (q - j)
        return out

    def semigroup_derivative(self, kernel: GaussianKernel, i: int, j: int, x, y):
        table = TaylorTable.constant(a=kernel.a0, b=kernel.b0, f=kernel.f0, g=kernel.g0,
                                     xbar=self.xbar, ybar=self.ybar)
        image = polynomial_of(self.coeffs, shift_operator_x(table), shift_operator_y(table))
        image = image.at_time(s1=kernel.elapsed)
        # acting on the constant 1 only the derivative-free part survives
        image = WeylElement({k: v for k, v in image if k[5] == 0 and k[6] == 0})
        d = compose(WeylElement.monomial(i=i, j=j), image)
        return d.apply_to_one(x, y, self.xbar, self.ybar)


def commutation_check(n: int, taylor: TaylorTable, f, elapsed: float = 0.5,
                      points: Optional[Iterable[Tuple[float, float]]] = None,
                      tol: float = 1e-12) -> float:
    """Sup over test points of ``|P0 A_n f - G_n P0 f|``.

    The left side applies ``A_n`` pointwise and integrates by Gauss-Hermite;
    the right side uses the normal-ordered ``G_n`` on the closed-form image
    ``P0 f``.
    """
    kernel = GaussianKernel.from_table(taylor, elapsed)
    xb, yb = taylor.xbar, taylor.ybar
    if points is None:
        points = [(xb + dx, yb + dy) for dx in (-0.2, 0.0, 0.3) for dy in (-0.1, 0.0, 0.15)]
    an = a_operator(n, taylor)
    gn = g_operator(n, taylor, var=1).at_time(s1=elapsed)

    def an_f(X, Y):
        total = 0.0 * X
        for k, c in an:
            total = total + c * (X - xb) ** k[3] * (Y - yb) ** k[4] * f.derivative(k[5], k[6], X, Y)
        return total

    worst = 0.0
    for x, y in points:
        lhs = gaussian_expectation(kernel, an_f, x, y, tol=tol)
        rhs = gn.apply(lambda i, j: f.semigroup_derivative(kernel, i, j, x, y), x, y, xb, yb)
        worst = max(worst, abs(lhs - rhs))
    return worst


# --- Hermite reduction ------------------------------------------------------


def hermite_h(n: int, z: float) -> float:
    """Physicists' Hermite polynomial by the three-term recursion."""
    if n < 0:
        raise ValueError("n must be non-negative")
    h_prev, h = 1.0, 2.0 * z
    if n == 0:
        return h_prev
    for k in range(1, n):
        h_prev, h = h, 2.0 * z * h - 2.0 * k * h_prev
    return h


def hermite_ratio(n: int, z: float, sigma0: float, tau: float) -> float:
    """``d_x^n (d_x^2 - d_x) u_BS / (d_x^2 - d_x) u_BS`` with
    ``z = (x - k - sigma0^2 tau / 2) / (sigma0 sqrt(2 tau))``."""
    if not (sigma0 > 0.0 and tau > 0.0):
        raise ValueError("sigma0 and tau must be positive")
    return (-1.0 / (sigma0 * math.sqrt(2.0 * tau))) ** n * hermite_h(n, z)


def x_derivative_profile(op: WeylElement, x: float, y: float, xbar: float, ybar: float) -> np.ndarray:
    """Coefficients ``c_i`` of ``sum_i c_i d_x^i`` obtained by evaluating the
    multiplication factors of a time-free element at (x, y) and discarding
    y-derivatives."""
    dx, dy = x - xbar, y - ybar
    c = np.zeros(MAX_DERIVATIVE_ORDER + 1)
    for k, v in op:
        if k[0] or k[1] or k[2]:
            raise ValueError("profile needs a time-free element")
        if k[6]:
            continue
        c[k[5]] += v * dx ** k[3] * dy ** k[4]
    return c


def divide_by_gamma_operator(c: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Write ``sum c_i D^i = Q(D)(D^2 - D) + r0 + r1 D``; returns (Q coefficients, r0, r1)."""
    c = np.array(c, dtype=float)
    nq = max(len(c) - 2, 1)
    q = np.zeros(nq)
    rem = c.copy()
    for i in range(len(c) - 1, 1, -1):
        coef = rem[i]
        q[i - 2] = coef
        rem[i] -= coef
        rem[i - 1] += coef
    return q, rem[0], rem[1]
