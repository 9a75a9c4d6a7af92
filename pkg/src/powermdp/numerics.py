"""Poisson distribution primitives.

The number of busy servers is modelled as Poisson(rho) with rho = lambda/mu,
so rho can be a few thousand and the support a few times that. Everything
below works in log-space to stay finite there.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special


def _check_rho(rho: float) -> None:
    if not rho > 0 or not math.isfinite(rho):
        raise ValueError(f"Poisson rate must be positive and finite, got {rho!r}")


def poisson_logpmf(x: int, rho: float) -> float:
    _check_rho(rho)
    if x < 0 or int(x) != x:
        raise ValueError(f"pmf support is the non-negative integers, got {x!r}")
    return x * math.log(rho) - rho - math.lgamma(x + 1)


def poisson_pmf(x: int, rho: float) -> float:
    """e^{-rho} rho^x / x!, evaluated through lgamma."""
    return math.exp(poisson_logpmf(x, rho))


def poisson_cdf(x: int, rho: float) -> float:
    """P(X <= x). Zero for negative x."""
    _check_rho(rho)
    if x < 0:
        return 0.0
    # regularized upper incomplete gamma Q(x+1, rho) equals the Poisson CDF
    return float(special.gammaincc(math.floor(x) + 1, rho))


def poisson_quantile(p: float, rho: float) -> int:
    """Smallest integer x with F(x; rho) >= p.

    The scan starts at floor(rho) and walks outward, so the typical cost is
    O(sqrt(rho)) CDF evaluations.
    """
    _check_rho(rho)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p!r}")
    x = int(math.floor(rho))
    if poisson_cdf(x, rho) >= p:
        while x > 0 and poisson_cdf(x - 1, rho) >= p:
            x -= 1
        return x
    x += 1
    while poisson_cdf(x, rho) < p:
        x += 1
    return x


def poisson_logpmf_range(lo: int, hi: int, rho: float) -> np.ndarray:
    """Vector of log f(x) for x = lo..hi inclusive."""
    _check_rho(rho)
    if lo < 0 or hi < lo:
        raise ValueError(f"bad support range [{lo}, {hi}]")
    x = np.arange(lo, hi + 1, dtype=float)
    return x * math.log(rho) - rho - special.gammaln(x + 1)
