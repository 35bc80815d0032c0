"""Simulated statistical-query access to hidden-direction instances.

Queries come from a typed catalog so that exact answers reduce to one-dimensional
integrals along the hidden direction.  Every query is bounded by clamping: ``x``
coordinates (or projections) to ``[-R, R]`` divided by ``R``, and the label to
``[-1, 1]``.  Attacks compute z-scores against the null of Gaussian ``x`` with
independent random signs, whose variances are closed form.
"""
from __future__ import annotations

import itertools
import math
import time
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from . import gauss, matcher, multivariate as mv, relu
from .piecewise import PiecewiseSignFunction, clipped_moments, moments

RADIUS = 8.0
ALPHA = 0.01
MIN_SAMPLES = 10_000
CLT_SIGMAS = 5.0
EXACT_TOL = 1e-12
S_CUTOFF = 12.0  # |<v, x>| beyond this carries no mass at double precision


class NotReducibleError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---- catalog --------------------------------------------------------------

def _ipow(a: np.ndarray, t: int) -> np.ndarray:
    """``a ** t`` for a small integer ``t`` by repeated squaring (much faster than float pow)."""
    out = np.ones_like(a)
    base = a
    while t:
        if t & 1:
            out = out * base
        t >>= 1
        if t:
            base = base * base
    return out


@dataclass(frozen=True)
class MonomialQuery:
    """``[clamp(y)] * prod_i (clamp(x_i) / R)^(t_i)``; ``powers`` maps coordinate to exponent."""

    powers: tuple[tuple[int, int], ...]
    with_label: bool = True
    radius: float = RADIUS

    def __post_init__(self):
        merged = Counter()
        for i, t in self.powers:
            if i < 0 or t < 0:
                raise ValueError("coordinates and exponents must be >= 0")
            merged[int(i)] += int(t)
        object.__setattr__(self, "powers", tuple(sorted((i, t) for i, t in merged.items() if t)))

    @classmethod
    def from_indices(cls, idx: Sequence[int], with_label: bool = True, radius: float = RADIUS):
        return cls(tuple(Counter(int(i) for i in idx).items()), with_label, radius)

    @property
    def degree(self) -> int:
        return sum(t for _, t in self.powers)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.clip(y, -1.0, 1.0) if self.with_label else np.ones(x.shape[0])
        for i, t in self.powers:
            out = out * _ipow(np.clip(x[:, i], -self.radius, self.radius) / self.radius, t)
        return out


@dataclass(frozen=True)
class ProjectionQuery:
    """``[clamp(y)] * (clamp(<w, x>) / R)^t`` for a declared unit vector ``w``."""

    w: tuple[float, ...]
    t: int
    with_label: bool = True
    radius: float = RADIUS

    def __post_init__(self):
        w = tuple(float(c) for c in self.w)
        if abs(math.sqrt(sum(c * c for c in w)) - 1.0) > 1e-12:
            raise ValueError("w must be a unit vector")
        if self.t < 0:
            raise ValueError("t must be >= 0")
        object.__setattr__(self, "w", w)

    @property
    def degree(self) -> int:
        return self.t

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(x) @ np.asarray(self.w)
        out = _ipow(np.clip(s, -self.radius, self.radius) / self.radius, self.t)
        return out * np.clip(y, -1.0, 1.0) if self.with_label else out


@dataclass(frozen=True)
class GridQuery:
    """Piecewise-constant ``q(<w, x>, y)``: ``values[sign][j]`` on the j-th cell cut by ``edges``.

    The label enters through its sign; ``values`` has rows for y < 0 and y >= 0.
    """

    w: tuple[float, ...]
    edges: tuple[float, ...]
    values: tuple[tuple[float, ...], tuple[float, ...]]

    def __post_init__(self):
        w = tuple(float(c) for c in self.w)
        if abs(math.sqrt(sum(c * c for c in w)) - 1.0) > 1e-12:
            raise ValueError("w must be a unit vector")
        e = tuple(float(c) for c in self.edges)
        if any(b <= a for a, b in zip(e[:-1], e[1:])):
            raise ValueError("edges must be strictly increasing")
        vals = tuple(tuple(float(c) for c in row) for row in self.values)
        if len(vals) != 2 or any(len(row) != len(e) + 1 for row in vals):
            raise ValueError("values needs two rows of len(edges) + 1 entries")
        if any(abs(c) > 1.0 for row in vals for c in row):
            raise ValueError("grid values must lie in [-1, 1]")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "values", vals)

    @property
    def degree(self) -> int:
        return 0

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(x) @ np.asarray(self.w)
        cell = np.searchsorted(np.asarray(self.edges), s, side="right")
        table = np.asarray(self.values)
        return table[(np.asarray(y) >= 0).astype(int), cell]


StatQuery = Union[MonomialQuery, ProjectionQuery, GridQuery]


# ---- closed-form Gaussian factors -----------------------------------------

def clamped_power_mean(t: int, mean=0.0, sd=1.0, radius: float = RADIUS):
    """``E[clamp(mean + sd g, -R, R)^t]`` for standard normal ``g`` (vectorized over ``mean``)."""
    mean = np.asarray(mean, dtype=float)
    if sd == 0.0:
        return np.clip(mean, -radius, radius) ** t
    lo, hi = (-radius - mean) / sd, (radius - mean) / sd
    table = gauss.partial_moments(t, lo, hi)  # E[g^j 1{lo < g < hi}]
    inner = sum(math.comb(t, j) * mean ** (t - j) * sd**j * table[j] for j in range(t + 1))
    return inner + radius**t * gauss.sf(hi) + (-radius) ** t * gauss.cdf(lo)


def clamped_monomial_second_moment(powers: Sequence[tuple[int, int]], radius: float = RADIUS) -> float:
    """``E[prod_i clamp(x_i)^(2 t_i)]`` for independent standard normal coordinates."""
    return float(np.prod([clamped_power_mean(2 * t, radius=radius) for _, t in powers]))


def clamped_moment(f: PiecewiseSignFunction, t: int, radius: float = RADIUS) -> float:
    """``E[f(z) clamp(z, -R, R)^t]``: the clipped partial moment plus the two clamped tails."""
    inner = float(clipped_moments(f, t, -radius, radius)[t])
    return inner + radius**t * (float(f(math.inf)) * gauss.sf(radius)
                                + float(f(-math.inf)) * (-1.0) ** t * gauss.cdf(-radius))


def _panels(breaks, width: float = 0.5) -> np.ndarray:
    inner = sorted(float(x) for x in breaks if abs(x) < S_CUTOFF)
    edges = np.array([-S_CUTOFF, *inner, S_CUTOFF])
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        n = max(1, int(math.ceil((b - a) / width)))
        out.extend(np.linspace(a, b, n + 1)[:-1].tolist())
    return np.array(out + [S_CUTOFF])


_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def gaussian_expect(h, breaks=()) -> float:
    """``E[h(s)]`` for standard normal ``s``; ``h`` is vectorized and smooth between ``breaks``."""
    p = _panels(breaks)
    mid, half = 0.5 * (p[:-1] + p[1:]), 0.5 * (p[1:] - p[:-1])
    s = mid[:, None] + half[:, None] * _GL_X
    return float(np.sum(h(s) * gauss.pdf(s) * _GL_W * half[:, None]))


def expect_along(f: PiecewiseSignFunction, h) -> float:
    """``E[f(s) h(s)]`` for standard normal ``s`` and smooth vectorized ``h``."""
    return gaussian_expect(lambda s: f(s.ravel()).reshape(s.shape) * h(s), f.breakpoints)


# ---- oracle ----------------------------------------------------------------

@dataclass(frozen=True)
class OracleAnswer:
    value: float
    tau: float
    mode: str  # "exact" or "empirical"
    n: Optional[int] = None
    rng_seed: Optional[int] = None
    band: float = 0.0  # CLT band in empirical mode, quadrature tolerance in exact mode
    adversarial: bool = False

    def to_dict(self) -> dict:
        return {"value": self.value, "tau": self.tau, "mode": self.mode, "n": self.n,
                "rng_seed": self.rng_seed, "band": self.band, "adversarial": self.adversarial}


def _label_factor(inst: mv.HiddenDirectionInstance) -> float:
    # clamp(C f) = min(C, 1) f since f is +-1
    return min(inst.scale_C, 1.0)


def exact_value(inst: mv.HiddenDirectionInstance, q: StatQuery) -> float:
    """``E[q(x, y)]`` under the instance, by 1-D integration along ``v``."""
    v = inst.v
    f = inst.f
    lab = _label_factor(inst)
    if isinstance(q, MonomialQuery):
        if not q.with_label:
            return float(np.prod([clamped_power_mean(t, radius=q.radius) / q.radius**t for _, t in q.powers]))
        if any(i >= inst.d for i, _ in q.powers):
            raise ValueError("monomial uses a coordinate beyond the dimension")
        touching = [(i, t) for i, t in q.powers if v[i] != 0.0]
        if len(touching) > 1:
            raise NotReducibleError("monomial couples several coordinates with the hidden direction")
        rest = float(np.prod([clamped_power_mean(t, radius=q.radius) / q.radius**t
                              for i, t in q.powers if v[i] == 0.0]))
        if not touching:
            return lab * rest * float(moments(f, 0)[0])
        i, t = touching[0]
        w = np.zeros(inst.d)
        w[i] = 1.0
        return rest * exact_value(inst, ProjectionQuery(tuple(w), t, True, q.radius))
    if isinstance(q, ProjectionQuery):
        w = np.asarray(q.w)
        if w.size != inst.d:
            raise ValueError("query direction has the wrong dimension")
        if not q.with_label:
            return float(clamped_power_mean(q.t, radius=q.radius)) / q.radius**q.t
        rho = float(np.clip(w @ v, -1.0, 1.0))
        sd = math.sqrt(max(0.0, 1.0 - rho * rho))
        if sd <= 1e-15:
            sign = 1.0 if rho > 0 else -1.0
            return lab * sign**q.t * clamped_moment(f, q.t, q.radius) / q.radius**q.t
        return lab * expect_along(f, lambda s: clamped_power_mean(q.t, rho * s, sd, q.radius)) / q.radius**q.t
    if isinstance(q, GridQuery):
        # the label sign is the sign of f, so row 1 applies where f = +1
        w = np.asarray(q.w)
        rho = float(np.clip(w @ v, -1.0, 1.0))
        sd = math.sqrt(max(0.0, 1.0 - rho * rho))
        e = np.asarray(q.edges)
        table = np.asarray(q.values)
        if sd <= 1e-15:
            # piecewise constant in s: sum the value on each cell times its Gaussian mass
            pts = np.unique(np.concatenate([f.b, e / rho]))
            cuts = np.concatenate([[-np.inf], pts, [np.inf]])
            mid = np.where(np.isfinite(cuts[:-1]) & np.isfinite(cuts[1:]), 0.5 * (cuts[:-1] + cuts[1:]),
                           np.where(np.isfinite(cuts[:-1]), cuts[:-1] + 1.0, cuts[1:] - 1.0))
            row = (f(mid) > 0).astype(int)
            vals = table[row, np.searchsorted(e, rho * mid, side="right")]
            return float(np.dot(vals, gauss.partial_moments(0, cuts[:-1], cuts[1:])[0]))

        def h(s):
            cdf = special.ndtr((e - rho * s[..., None]) / sd)
            pad = np.concatenate([np.zeros(s.shape + (1,)), cdf, np.ones(s.shape + (1,))], axis=-1)
            probs = np.diff(pad, axis=-1)
            pos = f(s.ravel()).reshape(s.shape) > 0
            return np.where(pos, probs @ table[1], probs @ table[0])

        return gaussian_expect(h, f.breakpoints)
    raise TypeError(f"unknown query type {type(q).__name__}")


def stat_oracle(inst: mv.HiddenDirectionInstance, q: StatQuery, tau: float, mode: str = "exact",
                n: Optional[int] = None, rng_seed: Optional[int] = None,
                adversarial: bool = False) -> OracleAnswer:
    """STAT(tau) answer to ``q``.

    ``exact`` integrates; ``empirical`` averages ``n`` labeled samples and requires ``tau``
    to cover the ``5 sigma`` CLT band.  With ``adversarial`` the answer moves by up to
    ``tau`` toward 0, the direction that hides signal from an attacker.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if mode == "exact":
        value, band = exact_value(inst, q), EXACT_TOL
    elif mode == "empirical":
        if n is None or rng_seed is None:
            raise ValueError("empirical mode needs n and rng_seed")
        batch = mv.sample_labeled(inst, n, rng_seed)
        vals = q(batch.x, batch.y)
        value = float(vals.mean())
        band = CLT_SIGMAS * float(vals.std(ddof=1)) / math.sqrt(n) if n > 1 else math.inf
        if band > tau:
            raise ValueError(f"tau={tau:.3g} is below the CLT band {band:.3g}; raise n")
    else:
        raise ValueError("mode must be 'exact' or 'empirical'")
    if adversarial:
        value = math.copysign(max(abs(value) - tau, 0.0), value)
    return OracleAnswer(value, tau, mode, n, rng_seed, band, adversarial)


# ---- SQ dimension -----------------------------------------------------------

@dataclass(frozen=True)
class SqDimCertificate:
    m: int
    rho_max: float
    s: int
    budget: float  # s^(1/3)/2 - 1, floored at 0
    tolerance: float  # 1 / s^(1/3)

    def to_dict(self) -> dict:
        return {"m": self.m, "rho_max": self.rho_max, "s": self.s, "budget": self.budget,
                "tolerance": self.tolerance}


def query_budget(s: int) -> tuple[float, float]:
    """Queries ``max(0, s^(1/3)/2 - 1)`` and tolerance ``s^(-1/3)`` of the SQ-dimension bound."""
    r = float(s) ** (1.0 / 3.0)
    return max(0.0, r / 2.0 - 1.0), 1.0 / r


def certify_matrix(C: np.ndarray) -> SqDimCertificate:
    m = C.shape[0]
    off = np.abs(C - np.diag(np.diag(C)))
    rho = float(off.max()) if m > 1 else 0.0
    s = m if rho == 0.0 else min(m, int(math.floor(1.0 / rho)))
    s = max(s, 1)
    budget, tol = query_budget(s)
    return SqDimCertificate(m, rho, s, budget, tol)


def sq_dim_certificate(f: PiecewiseSignFunction, pack: mv.PackingSet) -> SqDimCertificate:
    if pack.m < 1:
        raise ValueError("empty packing")
    return certify_matrix(mv.correlation_matrix(f, pack.vectors))


# ---- attacks ----------------------------------------------------------------

def bonferroni_threshold(count: int, alpha: float = ALPHA) -> float:
    """Two-sided |z| threshold at family-wise level ``alpha`` over ``count`` tests."""
    return float(-special.ndtri(alpha / (2 * count)))


def _monomials(d: int, deg: int) -> list[tuple[int, ...]]:
    return [c for t in range(deg + 1) for c in itertools.combinations_with_replacement(range(d), t)]


def _features(xc: np.ndarray, monos: list[tuple[int, ...]]) -> np.ndarray:
    out = np.empty((xc.shape[0], len(monos)))
    pos = {}
    for j, m in enumerate(monos):
        if not m:
            out[:, j] = 1.0
        else:
            out[:, j] = out[:, pos[m[:-1]]] * xc[:, m[-1]]
        pos[m] = j
    return out


@dataclass(frozen=True)
class AttackReport:
    degree_cap: int
    n: int
    count: int
    max_abs_z: float
    threshold: float
    detected: bool
    argmax: tuple[int, ...]
    by_degree: tuple[float, ...]  # max |z| per degree

    def to_dict(self) -> dict:
        return {"degree_cap": self.degree_cap, "n": self.n, "count": self.count,
                "max_abs_z": self.max_abs_z, "threshold": self.threshold, "detected": self.detected,
                "argmax": list(self.argmax), "max_abs_z_by_degree": list(self.by_degree)}


def monomial_means(x: np.ndarray, y: np.ndarray, degree_cap: int, radius: float = RADIUS,
                   chunk: int = 1 << 14) -> dict[tuple[int, ...], float]:
    """Sample means of ``clamp(y) prod clamp(x_i)`` over all monomials of degree <= ``degree_cap``.

    A degree-t monomial is a product of one of degree ``ceil(t/2)`` and one of degree
    ``floor(t/2)``, so all means come from one matrix product per chunk.
    """
    n, d = x.shape
    lo = _monomials(d, (degree_cap + 1) // 2)
    hi = _monomials(d, degree_cap // 2)
    acc = np.zeros((len(lo), len(hi)))
    yc = np.clip(y, -1.0, 1.0)
    for s in range(0, n, chunk):
        xc = np.clip(x[s : s + chunk], -radius, radius)
        A = _features(xc, lo) * yc[s : s + chunk, None]
        acc += A.T @ _features(xc, hi)
    acc /= n
    ilo = {m: j for j, m in enumerate(lo)}
    ihi = {m: j for j, m in enumerate(hi)}
    out = {}
    for m in _monomials(d, degree_cap):
        a = (len(m) + 1) // 2
        out[m] = float(acc[ilo[m[:a]], ihi[m[a:]]])
    return out


def moment_attack(x: np.ndarray, y: np.ndarray, degree_cap: int, radius: float = RADIUS,
                  alpha: float = ALPHA) -> AttackReport:
    """z-scores of every label-times-monomial mean of degree <= ``degree_cap`` against the null.

    Under the null ``x ~ N(0, I)`` with independent random +-1 labels, each mean is
    centered with variance ``E[prod clamp(x_i)^(2 t_i)] / n``.
    """
    n = x.shape[0]
    if n < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {n}")
    if degree_cap < 0:
        raise ValueError("degree_cap must be >= 0")
    means = monomial_means(x, y, degree_cap, radius)
    best, arg = 0.0, ()
    by_degree = [0.0] * (degree_cap + 1)
    for m, val in means.items():
        var = clamped_monomial_second_moment(tuple(Counter(m).items()), radius)
        z = abs(val) / math.sqrt(var / n)
        by_degree[len(m)] = max(by_degree[len(m)], z)
        if z > best:
            best, arg = z, m
    thr = bonferroni_threshold(len(means), alpha)
    return AttackReport(degree_cap, n, len(means), best, thr, best > thr, arg, tuple(by_degree))


def oracle_attack(x: np.ndarray, y: np.ndarray, v: np.ndarray, k: int, radius: float = RADIUS) -> float:
    """z-score of ``mean(clamp(y) clamp(<v, x>)^k)`` against the null, using its closed-form variance."""
    n = x.shape[0]
    vals = np.clip(y, -1.0, 1.0) * _ipow(np.clip(x @ np.asarray(v), -radius, radius), k)
    var = float(clamped_power_mean(2 * k, radius=radius))
    return float(vals.mean() / math.sqrt(var / n))


def first_nonzero_degree(f: PiecewiseSignFunction, k: int, tol: float = 1e-8, extra: int = 4) -> int:
    m = moments(f, k + extra)
    for t in range(k, k + extra + 1):
        if abs(m[t]) > tol:
            return t
    raise ValueError(f"moments {k}..{k + extra} all vanish")


# ---- experiment -------------------------------------------------------------

DEFAULT_CONFIG = {
    "instance": {"task": "ltf", "k": 4, "tol": 1e-10},
    "pack": {"d": 20, "m": 50, "bound": 0.75, "direction_index": 0},
    "samples": {"n": 1_000_000},
    "attack": {"alpha": ALPHA, "radius": RADIUS},
}


def _merge(config: dict) -> dict:
    out = {s: dict(v) for s, v in DEFAULT_CONFIG.items()}
    for sec, vals in config.items():
        out.setdefault(sec, {}).update(vals)
    return out


def _build_instance(cfg: dict) -> tuple[PiecewiseSignFunction, int, str, float, float]:
    task = cfg.get("task", "ltf")
    k = int(cfg["k"])
    tol = float(cfg.get("tol", 1e-10))
    if "path" in cfg:
        from . import io
        doc = io.load_instance(cfg["path"])
        return doc.f, doc.k, doc.task, doc.scale_C, doc.relu_corr
    if task == "ltf":
        f, _ = matcher.construct_ltf_hard(k, tol)
        return f, k, task, 1.0, float("nan")
    if task == "relu":
        inst = relu.construct_relu_hard(k, tol, rng_seed=int(cfg["rng_seed"]))
        return inst.f, k, task, inst.scale_C, inst.relu_corr
    raise ValueError("task must be 'ltf' or 'relu'")


def run_experiment(config: dict) -> dict:
    """construct -> pack -> sample -> attacks -> certificate, as one JSON-ready report.

    Every stochastic stage needs an explicit ``rng_seed``; wall-clock times are
    collected under ``timings`` and are the only non-reproducible part.
    """
    cfg = _merge(config)
    need = ["pack", "samples"] + (["instance"] if cfg["instance"].get("task") == "relu" else [])
    for sec in need:
        if "rng_seed" not in cfg[sec]:
            raise ExperimentError("config", f"[{sec}] needs an explicit rng_seed")
    timings = {}
    t0 = time.perf_counter()
    try:
        f, k, task, C, rc = _build_instance(cfg["instance"])
    except Exception as err:
        raise ExperimentError("construct", str(err)) from err
    timings["construct"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    p = cfg["pack"]
    try:
        pack = mv.packing(int(p["d"]), int(p["m"]), float(p["bound"]), int(p["rng_seed"]))
    except Exception as err:
        raise ExperimentError("pack", str(err)) from err
    timings["pack"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cert = sq_dim_certificate(f, pack)
    timings["certificate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    s = cfg["samples"]
    v = pack.vectors[int(p.get("direction_index", 0))]
    try:
        inst = mv.HiddenDirectionInstance(f, v, task, C)
        batch = mv.sample_labeled(inst, int(s["n"]), int(s["rng_seed"]))
    except Exception as err:
        raise ExperimentError("sample", str(err)) from err
    timings["sample"] = time.perf_counter() - t0

    a = cfg["attack"]
    radius, alpha = float(a["radius"]), float(a["alpha"])
    cap = int(a.get("degree_cap", k - 1 if task == "ltf" else k))
    t0 = time.perf_counter()
    try:
        battery = moment_attack(batch.x, batch.y, cap, radius, alpha)
        deg = int(a.get("oracle_degree", first_nonzero_degree(f, k if task == "ltf" else k + 1)))
        z = oracle_attack(batch.x, batch.y, v, deg, radius)
    except Exception as err:
        raise ExperimentError("attack", str(err)) from err
    timings["attack"] = time.perf_counter() - t0

    rows = [
        {"name": "battery below threshold", "value": battery.max_abs_z, "bound": battery.threshold,
         "pass": not battery.detected},
        {"name": "oracle attack detects", "value": abs(z), "bound": 5.0, "pass": abs(z) > 5.0},
        {"name": "certificate matrix property", "value": cert.rho_max, "bound": 1.0 / cert.s,
         "pass": cert.rho_max <= 1.0 / cert.s},
    ]
    return {
        "schema_version": 1,
        "config": cfg,
        "instance": {"task": task, "k": k, "breakpoints": list(f.breakpoints),
                     "leading_sign": f.leading_sign, "scale_C": C,
                     "relu_corr": None if math.isnan(rc) else rc},
        "pack": {"d": pack.d, "m": pack.m, "max_abs_inner": pack.max_abs_inner, "c_param": pack.c_param},
        "certificate": cert.to_dict(),
        "moment_attack": battery.to_dict(),
        "oracle_attack": {"degree": deg, "z": z, "detected": abs(z) > 5.0},
        "transition": rows,
        "pass": all(r["pass"] for r in rows),
        "timings": timings,
    }
