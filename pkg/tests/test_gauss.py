import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqhard import gauss
from sqhard.gauss import REAL_LINE, partial_moment, quadrature

mpmath.mp.dps = 40


def mp_partial_moment(t, a, b):
    pts = [a, 0, b] if a < 0 < b else [a, b]
    return float(mpmath.quad(lambda z: z**t * mpmath.npdf(z), pts))


def test_pdf_values():
    assert gauss.pdf(0.0) == pytest.approx(0.3989422804014327, rel=1e-15)
    assert gauss.pdf(1.0) == gauss.pdf(-1.0)
    assert 0 < gauss.pdf(12.0) < 1e-30
    assert gauss.pdf(38.5) == 0.0
    assert gauss.pdf(np.inf) == 0.0


def test_cdf_limits_and_inverse():
    assert gauss.cdf(0.0) == 0.5
    assert gauss.cdf(-np.inf) == 0.0
    assert gauss.cdf(np.inf) == 1.0
    # oracle: mpmath root of the 40-digit cdf
    root = float(mpmath.findroot(lambda z: mpmath.ncdf(z) - mpmath.mpf(3) / 4, 0.7))
    assert root == pytest.approx(0.6744897501960817, abs=1e-15)
    assert gauss.inv_cdf(0.75) == pytest.approx(root, abs=1e-15)
    # cdf(z) rounds to within 1.1e-16 of 1 for large z, so the plain round trip is
    # only resolvable to 1e-10 up to about z = 4.5; the upper tail goes through sf
    z = np.linspace(-8, 4.5, 401)
    np.testing.assert_allclose(gauss.inv_cdf(gauss.cdf(z)), z, rtol=0, atol=1e-10)
    z = np.linspace(0, 8, 401)
    np.testing.assert_allclose(-gauss.inv_cdf(gauss.sf(z)), z, rtol=0, atol=1e-10)
    assert np.all(np.diff(gauss.cdf(np.linspace(-40, 40, 1001))) >= 0)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_inv_cdf_rejects_out_of_range(p):
    with pytest.raises(ValueError):
        gauss.inv_cdf(p)


def test_partial_moment_known_values():
    assert partial_moment(0, REAL_LINE) == pytest.approx(1.0, abs=1e-14)
    assert partial_moment(1, REAL_LINE) == 0.0
    assert partial_moment(2, (0, np.inf)) == pytest.approx(0.5, abs=1e-15)
    # closed form 2 phi(0) - 3 phi(1), cross-checked by mpmath
    assert partial_moment(3, (0, 1)) == pytest.approx(mp_partial_moment(3, 0, 1), rel=1e-14)
    assert partial_moment(3, (0, 1)) == pytest.approx(0.0719723872, abs=1e-10)
    for t in range(0, 65, 2):
        assert partial_moment(t, REAL_LINE) == pytest.approx(gauss.normal_moment(t), rel=1e-13)


def test_degree_cap():
    with pytest.raises(gauss.DegreeCapError):
        partial_moment(65, (0, 1))
    with pytest.raises(ValueError):
        partial_moment(2, (1, 0))


def test_against_mpmath_wide_intervals():
    rng = np.random.default_rng(0)
    for t in range(0, 41, 3):
        for _ in range(10):
            a, b = np.sort(rng.uniform(-10, 10, 2))
            scale = max(1.0, gauss.normal_moment(t + t % 2))
            assert abs(partial_moment(t, (a, b)) - mp_partial_moment(t, a, b)) <= 1e-13 * scale


def test_recurrence_matches_quadrature():
    # absolute 1e-10 is only meaningful where the integrand is O(1): endpoints within [-1.5, 1.5]
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = np.sort(rng.uniform(-1.5, 1.5, 2))
        for t in range(21):
            q = quadrature(lambda z, t=t: z**t, (a, b), tol=1e-12)
            assert abs(partial_moment(t, (a, b)) - q) <= 1e-10


def test_quadrature_examples():
    assert quadrature(lambda z: 1.0, tol=1e-10) == pytest.approx(1.0, abs=1e-10)
    assert quadrature(lambda z: z * z, tol=1e-10) == pytest.approx(1.0, abs=1e-10)
    half_normal = quadrature(abs, tol=1e-10, breaks=[0.0])
    assert half_normal == pytest.approx(math.sqrt(2 / math.pi), abs=1e-10)
    assert half_normal == pytest.approx(2 * partial_moment(1, (0, np.inf)), abs=1e-10)


def test_quadrature_failure_carries_estimate():
    with pytest.raises(gauss.QuadratureError) as info:
        quadrature(lambda z: math.sin(1e4 * z) * z**8, (-30, 30), tol=1e-14, limit=3)
    assert math.isfinite(info.value.estimate)


def test_vectorized_matches_scalar():
    a = np.array([-np.inf, -2.0, 0.5, 3.0])
    b = np.array([np.inf, 1.0, 0.7, np.inf])
    table = gauss.partial_moments(6, a, b)
    for t in range(7):
        for i in range(4):
            assert table[t, i] == pytest.approx(partial_moment(t, (a[i], b[i])), rel=1e-14, abs=1e-300)


def test_partial_moment_table():
    tab = gauss.PartialMomentTable(8)
    assert abs(tab.entry(0, REAL_LINE) - 1) <= 1e-14
    assert tab.entry(3, (0.0, 1.0)) == partial_moment(3, (0.0, 1.0))
    with pytest.raises(gauss.DegreeCapError):
        tab.entry(9, (0.0, 1.0))


finite = st.floats(-12, 12, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 20), finite, finite, finite)
def test_additivity(t, x, y, w):
    a, b, c = sorted([x, y, w])
    whole = partial_moment(t, (a, c))
    parts = partial_moment(t, (a, b)) + partial_moment(t, (b, c))
    assert abs(whole - parts) <= 1e-12 * max(1.0, gauss.normal_moment(t + t % 2))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 20), finite, finite)
def test_symmetry(t, x, y):
    a, b = sorted([x, y])
    lhs = partial_moment(t, (-b, -a))
    rhs = (-1) ** t * partial_moment(t, (a, b))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, gauss.normal_moment(t + t % 2))
