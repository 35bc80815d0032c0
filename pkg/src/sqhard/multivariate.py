"""Hidden-direction lifts of 1-D sign functions to R^d.

``F_v(x) = C f(<v, x>)`` with ``x ~ N(0, I_d)``: packings of near-orthogonal
directions, chunk-seeded samplers for labeled and label-conditional draws, and the
exact correlation ``E[F_u F_v]`` from the bivariate normal law of ``(<u,x>, <v,x>)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy import special

from .piecewise import PiecewiseSignFunction, bivariate_correlation, conditional, relu_correlation

CHUNK = 1 << 15
BUDGET_FACTOR = 100
NORM_TOL = 1e-12
SCALE_RTOL = 1e-12


class PackingError(RuntimeError):
    def __init__(self, message: str, achieved: int):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True)
class PackingSet:
    d: int
    vectors: np.ndarray  # (m, d), unit rows
    max_abs_inner: float
    c_param: float  # c with bound = d^(c - 1/2), reported only

    @property
    def m(self) -> int:
        return int(self.vectors.shape[0])

    def to_dict(self) -> dict:
        return {"d": self.d, "m": self.m, "vectors": self.vectors.tolist(),
                "max_abs_inner": self.max_abs_inner, "c_param": self.c_param}

    @classmethod
    def from_dict(cls, d: dict) -> "PackingSet":
        V = np.asarray(d["vectors"], dtype=float).reshape(-1, int(d["d"]))
        return cls(int(d["d"]), V, max_abs_inner(V), float(d["c_param"]))


def max_abs_inner(V: np.ndarray) -> float:
    """Exact max over distinct pairs of ``|<u, v>|``; 0 for fewer than two vectors."""
    if V.shape[0] < 2:
        return 0.0
    G = np.abs(V @ V.T)
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def implied_c(d: int, bound: float) -> float:
    return 0.5 + math.log(bound) / math.log(d) if bound > 0 else -math.inf


def packing(d: int, m: int, bound: float, rng_seed: int = 0,
            budget: Optional[int] = None) -> PackingSet:
    """``m`` unit vectors in R^d with pairwise ``|<u, v>| <= bound``, by greedy rejection.

    Candidates are normalized Gaussian draws.  A rejected draw gets one retry as its
    component orthogonal to the vectors accepted so far, which lets small bounds
    succeed when ``m <= d``.  At most ``budget`` (default ``100 m``) draws are made.
    """
    if d < 2 or m < 1:
        raise ValueError("need d >= 2 and m >= 1")
    if not bound > 0:
        raise ValueError("bound must be positive")
    budget = BUDGET_FACTOR * m if budget is None else int(budget)
    rng = np.random.default_rng(rng_seed)
    V = np.empty((m, d))
    n = 0
    for _ in range(budget):
        if n == m:
            break
        g = rng.standard_normal(d)
        for cand in (g, g - V[:n].T @ (V[:n] @ g)):
            norm = np.linalg.norm(cand)
            if norm <= 1e-8 * np.linalg.norm(g):
                continue
            cand = cand / norm
            if n == 0 or np.max(np.abs(V[:n] @ cand)) <= bound:
                V[n] = cand
                n += 1
                break
    if n < m:
        raise PackingError(f"budget of {budget} candidates exhausted with {n} of {m} vectors", n)
    return PackingSet(d, V, max_abs_inner(V), implied_c(d, bound))


@dataclass(frozen=True)
class HiddenDirectionInstance:
    f: PiecewiseSignFunction
    v: np.ndarray
    task: str = "ltf"
    scale_C: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).ravel()
        object.__setattr__(self, "v", v)
        if abs(np.linalg.norm(v) - 1.0) > NORM_TOL:
            raise ValueError(f"direction must be a unit vector, norm is {np.linalg.norm(v)!r}")
        if self.task not in ("ltf", "relu"):
            raise ValueError("task must be 'ltf' or 'relu'")
        if self.task == "ltf" and self.scale_C != 1.0:
            raise ValueError("ltf instances have scale_C = 1")
        if self.task == "relu":
            prod = self.scale_C * relu_correlation(self.f)
            if abs(prod - 0.5) > SCALE_RTOL:
                raise ValueError(f"scale_C * relu_corr = {prod!r}, expected 1/2")

    @property
    def d(self) -> int:
        return int(self.v.size)

    def label(self, x: np.ndarray) -> np.ndarray:
        y = self.f(np.asarray(x, dtype=float) @ self.v).astype(float)
        return y if self.scale_C == 1.0 else self.scale_C * y


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class LabeledBatch:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)

    def __len__(self) -> int:
        return int(self.y.size)

    def __iter__(self) -> Iterator[LabeledSample]:
        for xi, yi in zip(self.x, self.y):
            yield LabeledSample(xi, float(yi))


def chunk_rng(rng_seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(rng_seed), int(chunk)])))


def _chunked(n: int, chunk: int, work, workers: int) -> list:
    sizes = [min(chunk, n - s) for s in range(0, n, chunk)]
    jobs = list(enumerate(sizes))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda j: work(*j), jobs))
    return [work(i, s) for i, s in jobs]


def _check_n(n: int):
    if n < 1:
        raise ValueError("n must be >= 1")


def sample_labeled(inst: HiddenDirectionInstance, n: int, rng_seed: int = 0, chunk: int = CHUNK,
                   workers: int = 1) -> LabeledBatch:
    """``n`` draws of ``x ~ N(0, I_d)`` with ``y = C f(<v, x>)``.

    Chunk ``i`` of size ``chunk`` uses its own generator seeded by ``(rng_seed, i)``, so
    the output does not depend on ``workers``.
    """
    _check_n(n)

    def work(i, size):
        x = chunk_rng(rng_seed, i).standard_normal((size, inst.d))
        return x, inst.label(x)

    parts = _chunked(n, chunk, work, workers)
    return LabeledBatch(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def truncated_normal(lo: np.ndarray, hi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of ``N(0,1)`` restricted to ``[lo, hi]`` at uniform ``u``.

    Intervals are mirrored onto the side of 0 holding the wider part and sampled in
    log-survival space, so deep tails keep full relative precision.
    """
    lo, hi, u = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float), np.asarray(u, float))
    flip = lo + hi < 0  # work where lo >= -hi, i.e. mostly on the upper side
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    u = np.where(flip, 1.0 - u, u)  # keeps the draw increasing in u
    la, lb = special.log_ndtr(-a), special.log_ndtr(-b)  # log Pr[Z > a], log Pr[Z > b]
    # Pr[Z > z] = Pr[Z > a] - u (Pr[Z > a] - Pr[Z > b])
    with np.errstate(divide="ignore"):
        frac = -np.expm1(lb - la)
        target = la + np.log1p(-u * frac)
    z = -special.ndtri_exp(target)
    z = np.clip(z, a, b)
    return np.where(flip, -z, z)


def _perp(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    return g - np.outer(g @ v, v)


def sample_conditional(inst: HiddenDirectionInstance, label: int, n: int, rng_seed: int = 0,
                       chunk: int = CHUNK, workers: int = 1) -> np.ndarray:
    """``n`` draws of ``x`` given ``f(<v, x>) = label``: ``x = z v + g`` with ``g`` Gaussian in v-perp.

    ``z`` picks a support interval with probability proportional to its Gaussian mass
    and then a truncated-normal point inside it.
    """
    if inst.task != "ltf":
        raise ValueError("conditional sampling needs an ltf instance")
    _check_n(n)
    cd = conditional(inst.f, label)
    lo = np.array([iv.lo for iv in cd.support])
    hi = np.array([iv.hi for iv in cd.support])
    cum = np.cumsum(cd.masses) / cd.normalizer

    def work(i, size):
        rng = chunk_rng(rng_seed, i)
        j = np.minimum(np.searchsorted(cum, rng.random(size), side="right"), lo.size - 1)
        z = truncated_normal(lo[j], hi[j], rng.random(size))
        g = rng.standard_normal((size, inst.d))
        return np.outer(z, inst.v) + _perp(g, inst.v)

    return np.concatenate(_chunked(n, chunk, work, workers))


def family_correlation(f: PiecewiseSignFunction, u: np.ndarray, v: np.ndarray) -> float:
    """Exact ``E[f(<u, x>) f(<v, x>)]`` for ``x ~ N(0, I_d)``."""
    u, v = np.asarray(u, float), np.asarray(v, float)
    for w in (u, v):
        if abs(np.linalg.norm(w) - 1.0) > NORM_TOL:
            raise ValueError("directions must be unit vectors")
    return bivariate_correlation(f, f, float(np.clip(u @ v, -1.0, 1.0)))


def correlation_matrix(f: PiecewiseSignFunction, vectors: np.ndarray) -> np.ndarray:
    """``E[F_u F_v]`` over all pairs of rows of ``vectors``; the diagonal is ``E[f^2] = 1``."""
    V = np.asarray(vectors, float)
    m = V.shape[0]
    G = np.clip(V @ V.T, -1.0, 1.0)
    out = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            out[i, j] = out[j, i] = bivariate_correlation(f, f, float(G[i, j]))
    return out
