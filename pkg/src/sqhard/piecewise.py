"""Piecewise-constant +-1 functions of a standard Gaussian variable."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gauss
from .bvn import bvnu
from .gauss import Interval


@dataclass(frozen=True)
class PiecewiseSignFunction:
    """``f(z) = leading_sign * (-1)^(number of breakpoints <= z)``.

    Pieces are right-closed at breakpoints: ``f(b_i)`` is the value to the right of ``b_i``.
    """

    breakpoints: tuple[float, ...] = ()
    leading_sign: int = 1

    def __post_init__(self):
        b = tuple(float(x) for x in self.breakpoints)
        if self.leading_sign not in (1, -1):
            raise ValueError("leading_sign must be +1 or -1")
        if any(not math.isfinite(x) for x in b):
            raise ValueError("breakpoints must be finite")
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "leading_sign", int(self.leading_sign))

    @classmethod
    def from_array(cls, breakpoints, leading_sign: int) -> "PiecewiseSignFunction":
        return cls(tuple(np.asarray(breakpoints, dtype=float).tolist()), leading_sign)

    @property
    def b(self) -> np.ndarray:
        return np.array(self.breakpoints, dtype=float)

    @property
    def piece_count(self) -> int:
        return len(self.breakpoints) + 1

    @property
    def signs(self) -> np.ndarray:
        """Value on each piece, left to right."""
        n = self.piece_count
        return self.leading_sign * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([[-np.inf], self.b, [np.inf]])

    def __neg__(self) -> "PiecewiseSignFunction":
        return PiecewiseSignFunction(self.breakpoints, -self.leading_sign)

    def __call__(self, z):
        return evaluate(self, z)

    def to_dict(self) -> dict:
        return {"leading_sign": self.leading_sign, "breakpoints": list(self.breakpoints)}

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseSignFunction":
        return cls(tuple(float(x) for x in d["breakpoints"]), int(d["leading_sign"]))


def sign_function() -> PiecewiseSignFunction:
    return PiecewiseSignFunction((0.0,), -1)


def constant(value: int = 1) -> PiecewiseSignFunction:
    return PiecewiseSignFunction((), value)


def evaluate(f: PiecewiseSignFunction, z):
    """Value of ``f`` at ``z`` (scalar or array); breakpoints take the right-piece value."""
    z = np.asarray(z, dtype=float)
    idx = np.searchsorted(f.b, z, side="right")
    out = np.where(idx % 2 == 0, f.leading_sign, -f.leading_sign)
    return int(out) if out.ndim == 0 else out.astype(np.int8)


def moments(f: PiecewiseSignFunction, tmax: int) -> np.ndarray:
    """``E[f(z) z^t]`` for t = 0..tmax."""
    e = f.edges
    table = gauss.partial_moments(tmax, e[:-1], e[1:])
    return _signed_sum(table, f.signs)


def moment(f: PiecewiseSignFunction, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    return float(moments(f, t)[t])


def _signed_sum(table: np.ndarray, signs: np.ndarray) -> np.ndarray:
    # sum positive and negative pieces separately to keep cancellation in one place
    pos = table[:, signs > 0].sum(axis=1)
    neg = table[:, signs < 0].sum(axis=1)
    return pos - neg


def clipped_moments(f: PiecewiseSignFunction, tmax: int, lo: float, hi: float) -> np.ndarray:
    """``int_lo^hi f(z) z^t phi(z) dz`` for t = 0..tmax."""
    e = np.clip(f.edges, lo, hi)
    table = gauss.partial_moments(tmax, e[:-1], e[1:])
    return _signed_sum(table, f.signs)


def relu_correlation(f: PiecewiseSignFunction) -> float:
    """``E[f(z) max(0, z)]``."""
    return float(clipped_moments(f, 1, 0.0, np.inf)[1])


def halfspace_correlation(f: PiecewiseSignFunction, beta: float) -> float:
    """``E[f(z) sign(z - beta)] = 2 int_beta^inf f phi - E[f]``."""
    upper = clipped_moments(f, 0, beta, np.inf)[0] if beta < np.inf else 0.0
    return float(2.0 * upper - moment(f, 0))


def best_halfspace(f: PiecewiseSignFunction) -> tuple[float, float, int]:
    """Threshold maximizing |E[f(z) sign(z - beta)]| over breakpoints and {-inf, 0, +inf}.

    Returns ``(beta, |corr|, sign_flip)``; the halfspace ``sign_flip * sign(z - beta)``
    attains the correlation.  Ties (within 1e-12) go to the smallest |beta|, then the
    smallest beta, so the choice does not depend on the overall sign of ``f``.
    """
    if not f.breakpoints:
        raise ValueError("best_halfspace needs at least one breakpoint")
    cands = sorted(set(f.breakpoints) | {-np.inf, 0.0, np.inf})
    corr = np.array([halfspace_correlation(f, beta) for beta in cands])
    best = np.max(np.abs(corr))
    tied = [i for i in range(len(cands)) if abs(corr[i]) >= best - 1e-12]
    i = min(tied, key=lambda j: (abs(cands[j]), cands[j]))
    flip = 1 if corr[i] >= 0 else -1
    return float(cands[i]), float(abs(corr[i])), flip


@dataclass(frozen=True)
class ConditionalDistribution:
    """Standard normal restricted to ``{f = label}``; density ``A(z) = phi(z) 1{f = label} / normalizer``."""

    support: tuple[Interval, ...]
    masses: tuple[float, ...]
    normalizer: float

    @property
    def chi_square_plus_one(self) -> float:
        """``int A(z)^2 / phi(z) dz``."""
        return float(sum(self.masses) / self.normalizer**2)

    def moment(self, t: int) -> float:
        lo = np.array([iv.lo for iv in self.support])
        hi = np.array([iv.hi for iv in self.support])
        return float(gauss.partial_moments(t, lo, hi)[t].sum() / self.normalizer)

    def moments(self, tmax: int) -> np.ndarray:
        lo = np.array([iv.lo for iv in self.support])
        hi = np.array([iv.hi for iv in self.support])
        return gauss.partial_moments(tmax, lo, hi).sum(axis=1) / self.normalizer

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        acc = np.zeros_like(x)
        for iv, m in zip(self.support, self.masses):
            top = np.clip(x, iv.lo, iv.hi)
            acc = acc + np.where(x <= iv.lo, 0.0, gauss.partial_moments(0, iv.lo, top)[0])
        return acc / self.normalizer


def conditional(f: PiecewiseSignFunction, label: int) -> ConditionalDistribution:
    if label not in (1, -1):
        raise ValueError("label must be +1 or -1")
    e = f.edges
    keep = f.signs == label
    lo, hi = e[:-1][keep], e[1:][keep]
    masses = gauss.partial_moments(0, lo, hi)[0]
    if masses.size == 0 or masses.sum() <= 0:
        raise ValueError(f"f never takes the value {label}")
    support = tuple(Interval(float(a), float(b)) for a, b in zip(lo, hi))
    return ConditionalDistribution(support, tuple(float(m) for m in masses), float(masses.sum()))


def _jumps(f: PiecewiseSignFunction) -> tuple[float, np.ndarray, np.ndarray]:
    """Write ``f(s) = a0 + sum_i d_i 1{s >= b_i}`` on the clamped line |s| <= Z_CLAMP."""
    b = f.b
    b = b[np.abs(b) <= gauss.Z_CLAMP]  # farther jumps carry no Gaussian mass
    left = evaluate(f, np.nextafter(b, -np.inf)).astype(float) if b.size else np.zeros(0)
    a0 = float(left[0]) if b.size else float(evaluate(f, 0.0))
    return a0, b, -2.0 * left


def bivariate_correlation(f: PiecewiseSignFunction, g: PiecewiseSignFunction, rho: float) -> float:
    """``E[f(s) g(t)]`` for standard bivariate normal (s, t) with correlation ``rho``.

    Both functions are written as a constant plus step jumps, so the expectation is a
    sum of orthant probabilities Pr[s >= b_i, t >= c_j].
    """
    rho = float(rho)
    if not -1.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    f0, fb, fd = _jumps(f)
    g0, gb, gd = _jumps(g)
    total = f0 * g0
    if gb.size:
        total += f0 * float(np.dot(gd, gauss.sf(gb)))
    if fb.size:
        total += g0 * float(np.dot(fd, gauss.sf(fb)))
    if fb.size and gb.size:
        H, K = np.meshgrid(fb, gb, indexing="ij")
        total += float(fd @ bvnu(H, K, rho) @ gd)
    return float(total)


@dataclass(frozen=True)
class MomentReport:
    """Gaussian moments of a sign function.

    ``order`` is the number of moments required to vanish (t < order): k for the
    halfspace construction and k + 1 for the ReLU one.  ``moments`` covers t = 0..order.
    """

    k: int
    moments: tuple[float, ...]
    relu_corr: float
    max_abs_moment: float
    order: int = field(default=-1)

    def __post_init__(self):
        if self.order < 0:
            object.__setattr__(self, "order", self.k)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "order": self.order,
            "moments": list(self.moments),
            "relu_corr": self.relu_corr,
            "max_abs_moment": self.max_abs_moment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MomentReport":
        return cls(int(d["k"]), tuple(float(x) for x in d["moments"]), float(d["relu_corr"]),
                   float(d["max_abs_moment"]), int(d.get("order", d["k"])))


def moment_report(f: PiecewiseSignFunction, k: int, order: int | None = None) -> MomentReport:
    order = k if order is None else order
    m = moments(f, order)
    mx = float(np.max(np.abs(m[:order]))) if order > 0 else 0.0
    return MomentReport(k, tuple(float(x) for x in m), relu_correlation(f), mx, order)


def max_abs_moment(f: PiecewiseSignFunction, order: int) -> float:
    if order <= 0:
        return 0.0
    return float(np.max(np.abs(moments(f, order - 1))))


def from_breakpoints(breakpoints: Sequence[float], leading_sign: int) -> PiecewiseSignFunction:
    return PiecewiseSignFunction(tuple(float(x) for x in breakpoints), leading_sign)
