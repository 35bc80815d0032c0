"""Legendre polynomials on [-1, 1] and the Lebesgue-measure projection of the ReLU.

Everything here uses the plain inner product ``<g, h> = int_{-1}^{1} g h dz``; Gaussian
moments live in ``gauss`` and ``piecewise`` and the two are only combined in ``relu``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np


def legendre_eval(n: int, z):
    """``P_n(z)`` by the three-term recurrence ``(n+1) P_(n+1) = (2n+1) z P_n - n P_(n-1)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return _scalar_or_array(LegendreBasis(n).eval(z)[n])


def _scalar_or_array(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


@dataclass(frozen=True)
class LegendreBasis:
    degree_max: int

    def __post_init__(self):
        if self.degree_max < 0:
            raise ValueError("degree_max must be >= 0")

    def eval(self, z) -> np.ndarray:
        """``P_0(z), ..., P_n(z)`` stacked along a new leading axis."""
        z = np.asarray(z, dtype=float)
        out = np.empty((self.degree_max + 1,) + z.shape)
        out[0] = 1.0
        if self.degree_max >= 1:
            out[1] = z
        for n in range(1, self.degree_max):
            out[n + 1] = ((2 * n + 1) * z * out[n] - n * out[n - 1]) / (n + 1)
        return out

    def derivative(self, z) -> np.ndarray:
        """``P'_0(z), ..., P'_n(z)`` via ``P'_(n+1) = P'_(n-1) + (2n+1) P_n``."""
        p = self.eval(z)
        d = np.zeros_like(p)
        for n in range(0, self.degree_max):
            d[n + 1] = (d[n - 1] if n >= 1 else 0.0) + (2 * n + 1) * p[n]
        return d

    def series(self, coeffs, z):
        """``sum_t coeffs[t] P_t(z)``."""
        c = np.asarray(coeffs, dtype=float)
        if c.size > self.degree_max + 1:
            raise ValueError("more coefficients than basis polynomials")
        return np.tensordot(c, self.eval(z)[: c.size], axes=1)


@lru_cache(maxsize=None)
def power_coeffs(n: int) -> tuple[Fraction, ...]:
    """Exact monomial coefficients of ``P_n``, lowest degree first."""
    if n == 0:
        return (Fraction(1),)
    if n == 1:
        return (Fraction(0), Fraction(1))
    a, b = power_coeffs(n - 1), power_coeffs(n - 2)
    out = [Fraction(0)] * (n + 1)
    for j, c in enumerate(a):
        out[j + 1] += Fraction(2 * n - 1, n) * c
    for j, c in enumerate(b):
        out[j] -= Fraction(n - 1, n) * c
    return tuple(out)


@lru_cache(maxsize=None)
def relu_legendre_exact(t: int) -> Fraction:
    """``gamma_t = int_0^1 z P_t(z) dz`` as an exact rational."""
    return sum((c / (j + 2) for j, c in enumerate(power_coeffs(t))), Fraction(0))


def relu_legendre_coeffs(k: int) -> np.ndarray:
    """``gamma_0..gamma_k`` with ``gamma_t = int_{-1}^{1} max(0, z) P_t(z) dz``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return np.array([float(relu_legendre_exact(t)) for t in range(k + 1)])


@dataclass(frozen=True)
class ProjectionPoly:
    """Degree-k Lebesgue projection ``p`` of the ReLU onto polynomials on [-1, 1]."""

    k: int
    coeffs: tuple[float, ...]  # Legendre coefficients (2t+1)/2 * gamma_t

    def __call__(self, z):
        return _scalar_or_array(LegendreBasis(self.k).series(self.coeffs, z))

    def power_coeffs(self) -> np.ndarray:
        """Monomial coefficients of ``p`` (lowest degree first), exact before rounding."""
        acc = [Fraction(0)] * (self.k + 1)
        for t in range(self.k + 1):
            ct = Fraction(2 * t + 1, 2) * relu_legendre_exact(t)
            for j, c in enumerate(power_coeffs(t)):
                acc[j] += ct * c
        return np.array([float(x) for x in acc])

    def residual_sq(self) -> float:
        """``int_{-1}^{1} (ReLU - p)^2 dz = 1/3 - sum_t (2t+1)/2 gamma_t^2`` (exact rational)."""
        s = Fraction(1, 3) - sum((Fraction(2 * t + 1, 2) * relu_legendre_exact(t) ** 2
                                  for t in range(self.k + 1)), Fraction(0))
        return float(s)


def projection_poly(k: int) -> ProjectionPoly:
    g = relu_legendre_coeffs(k)
    t = np.arange(k + 1)
    return ProjectionPoly(k, tuple(float(x) for x in (2 * t + 1) / 2 * g))


def lebesgue_integral(power: np.ndarray, lo, hi):
    """``int_lo^hi q(z) dz`` for the polynomial with monomial coefficients ``power``."""
    anti = np.concatenate([[0.0], np.asarray(power, dtype=float) / np.arange(1, len(power) + 1)])
    P = np.polynomial.polynomial.polyval
    return P(np.asarray(hi, dtype=float), anti) - P(np.asarray(lo, dtype=float), anti)
