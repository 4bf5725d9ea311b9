"""Regenerate tests/frozen_values.json from independent high-precision oracles.

* Black-Scholes: mpmath erfc at 40 digits.
* Heston: the original two-probability (P1, P2) Fourier inversion, written
  against mpmath with its own characteristic function (no code shared with
  the package).
* Gaussian smoothing of the call-spread distortion: mpmath quadrature.

Run: python3 tests/oracle_scripts/generate_frozen.py
"""

import json
from pathlib import Path

import mpmath as mp

mp.mp.dps = 40


def bs_call(x, sigma, k, tau):
    x, sigma, k, tau = map(mp.mpf, (x, sigma, k, tau))
    sd = sigma * mp.sqrt(tau)
    dp = (x - k) / sd + sd / 2
    dm = dp - sd
    N = lambda z: mp.erfc(-z / mp.sqrt(2)) / 2
    return mp.e**x * N(dp) - mp.e**k * N(dm)


def heston_p(j, x, v, k, tau, delta, theta, kappa, rho):
    # Heston (1993) with zero rates and zero market price of vol risk
    u_j = mp.mpf(0.5) if j == 1 else mp.mpf(-0.5)
    b_j = kappa - rho * delta if j == 1 else kappa
    a = kappa * theta

    def f(phi):
        i = mp.mpc(0, 1)
        d = mp.sqrt((rho * delta * phi * i - b_j) ** 2 - delta**2 * (2 * u_j * phi * i - phi**2))
        g = (b_j - rho * delta * phi * i - d) / (b_j - rho * delta * phi * i + d)
        e = mp.e ** (-d * tau)
        C = a / delta**2 * ((b_j - rho * delta * phi * i - d) * tau - 2 * mp.log((1 - g * e) / (1 - g)))
        D = (b_j - rho * delta * phi * i - d) / delta**2 * (1 - e) / (1 - g * e)
        return mp.re(mp.e ** (C + D * v + i * phi * (x - k)) / (i * phi))

    return mp.mpf(0.5) + mp.quad(f, [0, 10, 50, 200, mp.inf]) / mp.pi


def heston_call(x, v, k, tau, delta, theta, kappa, rho):
    args = [mp.mpf(z) for z in (x, v, k, tau, delta, theta, kappa, rho)]
    return (mp.e ** args[0] * heston_p(1, *args) - mp.e ** args[2] * heston_p(2, *args))


def smoothed_spread(mean, sd, k1, k2, c):
    # E[exp(-c * ((Z - k1)^+ - (Z - k2)^+))], Z ~ N(mean, sd^2)
    dens = lambda z: mp.npdf(z, mean, sd)
    phi = lambda z: max(z - k1, 0) - max(z - k2, 0)
    return mp.quad(lambda z: mp.e ** (-c * phi(z)) * dens(z), [-mp.inf, k1, k2, mp.inf])


def main():
    out = {
        "bs_call_x0_k0_s02_t1": float(bs_call(0, 0.2, 0, 1)),
        "heston_ref": {
            "params": [0.2, 0.04, 1.15, -0.4], "x": 0.0, "y": 0.04, "T": 0.25,
            "strikes": [-0.1, 0.0, 0.1],
            "prices": [float(heston_call(0, 0.04, k, 0.25, 0.2, 0.04, 1.15, -0.4)) for k in (-0.1, 0.0, 0.1)],
        },
        "smoothed_spread": {
            "mean": 0.045, "sd": 0.012, "k1": 0.04, "k2": 0.07, "c": 38.4,
            "value": float(smoothed_spread(mp.mpf("0.045"), mp.mpf("0.012"), mp.mpf("0.04"),
                                           mp.mpf("0.07"), mp.mpf("38.4"))),
        },
    }
    path = Path(__file__).resolve().parents[1] / "frozen_values.json"
    path.write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
