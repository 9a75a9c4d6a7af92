import math

import mpmath
import pytest
from hypothesis import given, strategies as st

from powermdp.numerics import (poisson_cdf, poisson_logpmf_range, poisson_pmf,
                               poisson_quantile)

mpmath.mp.dps = 40


def mp_pmf(x, rho):
    return mpmath.exp(-rho) * mpmath.power(rho, x) / mpmath.factorial(x)


def mp_cdf(x, rho):
    return mpmath.fsum(mp_pmf(k, rho) for k in range(x + 1))


@pytest.mark.parametrize("x,rho", [(0, 1.0), (3, 2.5), (30, 30.0), (55, 30.0), (2000, 1900.0)])
def test_pmf_matches_high_precision(x, rho):
    assert poisson_pmf(x, rho) == pytest.approx(float(mp_pmf(x, mpmath.mpf(rho))), rel=1e-11)


@pytest.mark.parametrize("x,rho", [(0, 1.0), (5, 4.0), (29, 30.0), (45, 30.0), (10, 30.0)])
def test_cdf_matches_high_precision(x, rho):
    assert poisson_cdf(x, rho) == pytest.approx(float(mp_cdf(x, mpmath.mpf(rho))), rel=1e-11)


def test_cdf_negative_is_zero():
    assert poisson_cdf(-1, 3.0) == 0.0


def test_large_rho_stays_finite():
    assert 0 < poisson_pmf(5000, 5000.0) < 1
    assert math.isfinite(poisson_logpmf_range(0, 12000, 5000.0).max())


def linear_scan_quantile(p, rho):
    x = 0
    while float(mp_cdf(x, mpmath.mpf(rho))) < p:
        x += 1
    return x


@pytest.mark.parametrize("p,rho", [(0.5, 30.0), (0.005, 30.0), (0.995, 30.0), (0.999999, 1.0),
                                   (0.3, 0.2), (0.9, 7.5)])
def test_quantile_against_linear_scan(p, rho):
    assert poisson_quantile(p, rho) == linear_scan_quantile(p, rho)


def test_median_at_thirty():
    assert poisson_quantile(0.5, 30.0) == 30


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_quantile_domain(p):
    with pytest.raises(ValueError):
        poisson_quantile(p, 2.0)


def test_bad_rate_rejected():
    with pytest.raises(ValueError):
        poisson_pmf(1, 0.0)
    with pytest.raises(ValueError):
        poisson_pmf(-1, 1.0)


@given(x=st.integers(0, 200), rho=st.floats(0.05, 150))
def test_cdf_increment_is_pmf(x, rho):
    assert poisson_cdf(x, rho) - poisson_cdf(x - 1, rho) == pytest.approx(poisson_pmf(x, rho), abs=1e-12)


@given(p=st.floats(1e-6, 1 - 1e-6), rho=st.floats(0.05, 300))
def test_quantile_bracket(p, rho):
    q = poisson_quantile(p, rho)
    assert poisson_cdf(q - 1, rho) < p <= poisson_cdf(q, rho)


@given(rho=st.floats(0.05, 100), n=st.integers(0, 300))
def test_partial_sums_bounded(rho, n):
    assert poisson_pmf(n, rho) >= 0
    assert sum(math.exp(v) for v in poisson_logpmf_range(0, n, rho)) <= 1 + 1e-12
