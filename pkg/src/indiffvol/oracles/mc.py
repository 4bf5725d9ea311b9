"""Monte Carlo linear price under the minimal martingale measure.

Under that measure ``dX = -a dt + sigma dW1`` and
``dY = f dt + beta (rho dW1 + sqrt(1 - rho^2) dW2)`` with the grouped
coefficients of the model.  Euler-Maruyama with full truncation: the factor
is clipped to the lower edge of the model domain inside every coefficient
evaluation, while the unclipped state is carried forward.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from ..model_spec import LSVModel, grouped_arrays

SHARD_PATHS = 50_000


@dataclass(frozen=True)
class MCResult:
    price: float
    standard_error: float
    paths: int
    steps: int
    seed: int

    def report(self) -> dict:
        return {"scheme": "Euler-Maruyama, full truncation, antithetic", "value": self.price,
                "standard_error": self.standard_error, "paths": self.paths,
                "steps": self.steps, "seed": self.seed}


def call_payoff(k: float) -> Callable[[np.ndarray], np.ndarray]:
    ek = math.exp(k)
    return lambda x: np.maximum(np.exp(x) - ek, 0.0)


def _shard(model: LSVModel, payoffs, x, y, tau, pairs, steps, seed_seq) -> np.ndarray:
    """Sum and sum of squares of antithetic-pair averages for each payoff."""
    rng = np.random.Generator(np.random.Philox(seed_seq))
    dt = tau / steps
    sq = math.sqrt(dt)
    rho = model.rho
    rbar = math.sqrt(max(0.0, 1.0 - rho * rho))
    ylo = model.domain[2]
    X = np.full(2 * pairs, float(x))
    Y = np.full(2 * pairs, float(y))
    for _ in range(steps):
        z = rng.standard_normal((2, pairs))
        z1 = np.concatenate([z[0], -z[0]])
        z2 = np.concatenate([z[1], -z[1]])
        co = grouped_arrays(model, X, np.maximum(Y, ylo))
        X = X - co["a"] * dt + co["sigma"] * sq * z1
        Y = Y + co["f"] * dt + co["beta"] * sq * (rho * z1 + rbar * z2)
    out = np.empty((len(payoffs), 2))
    for i, pay in enumerate(payoffs):
        v = pay(X)
        pair = 0.5 * (v[:pairs] + v[pairs:])
        out[i] = pair.sum(), (pair * pair).sum()
    return out


def mc_linear_prices(model: LSVModel, payoffs: Sequence[Callable], t: float, x: float, y: float,
                     T: float, paths: int = 1_000_000, steps: int = 250, seed: int = 0,
                     jobs: int = 1) -> List[MCResult]:
    """Several payoffs priced on one set of paths (common random numbers).

    ``paths`` counts simulated paths, i.e. twice the number of antithetic
    pairs.  Shards use independent Philox streams spawned from ``seed`` so the
    result does not depend on ``jobs``.
    """
    if paths < 2 or paths % 2:
        raise ValueError("paths must be an even number >= 2")
    tau = T - t
    if tau <= 0.0:
        raise ValueError("T must exceed t")
    pairs = paths // 2
    sizes = [SHARD_PATHS // 2] * (pairs // (SHARD_PATHS // 2))
    if pairs % (SHARD_PATHS // 2):
        sizes.append(pairs % (SHARD_PATHS // 2))
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    args = [(model, payoffs, x, y, tau, n, steps, s) for n, s in zip(sizes, seqs)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(lambda a: _shard(*a), args))
    else:
        parts = [_shard(*a) for a in args]
    tot = np.sum(parts, axis=0)
    res = []
    for s1, s2 in tot:
        mean = s1 / pairs
        var = max(s2 / pairs - mean * mean, 0.0) * pairs / max(pairs - 1, 1)
        se = math.sqrt(var / pairs)
        res.append(MCResult(price=float(mean), standard_error=float(se), paths=paths,
                            steps=steps, seed=seed))
    return res


def mc_linear_price(model: LSVModel, payoff: Callable, t: float, x: float, y: float, T: float,
                    paths: int = 1_000_000, steps: int = 250, seed: int = 0,
                    jobs: int = 1) -> MCResult:
    return mc_linear_prices(model, [payoff], t, x, y, T, paths, steps, seed, jobs)[0]
