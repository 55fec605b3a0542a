"""Reference computations used to check the fast paths.

These deliberately avoid the scipy special-function code used by
:mod:`morphoscale.dirmult`: log-gamma comes from mpmath at 40 digits.
"""

from __future__ import annotations

import itertools
import math
from typing import Iterator

import mpmath
import numpy as np

mpmath.mp.dps = 40


def mp_log_dirmult(k, alpha, include_coefficient: bool = True) -> mpmath.mpf:
    k = [int(x) for x in k]
    alpha = [mpmath.mpf(float(a)) for a in alpha]
    N = sum(k)
    if N == 0:
        return mpmath.mpf(0)
    A = mpmath.fsum(alpha)
    value = mpmath.loggamma(A) - mpmath.loggamma(N + A)
    value += mpmath.fsum(mpmath.loggamma(ki + ai) - mpmath.loggamma(ai) for ki, ai in zip(k, alpha))
    if include_coefficient:
        value += mpmath.loggamma(N + 1) - mpmath.fsum(mpmath.loggamma(ki + 1) for ki in k)
    return value


def fd_gradient(k, alpha, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the high-precision log-likelihood."""
    alpha = np.asarray(alpha, dtype=np.float64)
    out = np.empty(alpha.size)
    for i in range(alpha.size):
        h = rel_step * alpha[i]
        up, down = alpha.copy(), alpha.copy()
        up[i] += h
        down[i] -= h
        diff = mp_log_dirmult(k, up, False) - mp_log_dirmult(k, down, False)
        out[i] = float(diff / (mpmath.mpf(float(up[i])) - mpmath.mpf(float(down[i]))))
    return out


def compositions(N: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All non-negative integer vectors of length ``parts`` summing to ``N``."""
    for cut in itertools.combinations(range(N + parts - 1), parts - 1):
        bounds = (-1,) + cut + (N + parts - 1,)
        yield tuple(bounds[i + 1] - bounds[i] - 1 for i in range(parts))


def multinomial_pmf(k, rho: np.ndarray) -> np.ndarray:
    """Multinomial pmf of counts ``k`` for each row of probabilities ``rho``."""
    k = [int(x) for x in k]
    coef = math.factorial(sum(k))
    for ki in k:
        coef //= math.factorial(ki)
    rho = np.atleast_2d(rho)
    return coef * np.prod(rho ** np.asarray(k), axis=1)


def monte_carlo_dirmult(k, alpha, draws: int, rng: np.random.Generator, chunk: int = 200_000) -> tuple[float, float]:
    """Monte Carlo estimate of the Dirichlet-Multinomial pmf and its standard error."""
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        p = multinomial_pmf(k, rng.dirichlet(alpha, size=n))
        total += p.sum()
        total_sq += (p**2).sum()
        done += n
    mean = total / draws
    var = max(total_sq / draws - mean**2, 0.0)
    return mean, math.sqrt(var / draws)
