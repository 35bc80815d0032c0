"""ReLU-hard sign functions: O(k) pieces, E[f(z) z^t] = 0 for t <= k, E[f ReLU] > 0.

Pipeline:

1. bounded seed ``f'(z) = c (ReLU(z) - p(z)) / phi(z)`` on [-1, 1], where ``p`` is the
   Lebesgue projection of the ReLU onto degree-k polynomials, so every Gaussian moment
   of degree <= k vanishes while ``E[f' ReLU] = c int (ReLU - p)^2 > 0``;
2. randomized rounding to +-1 on a delta-grid of [-1, 1], with an alternating
   extension outside, redrawn until the moments and correlation check out;
3. the moment-conserving flow, first on positive breakpoints (which also keeps the
   ReLU correlation fixed) and then on negative ones (where it has zero gradient);
4. a minimum-norm Newton polish of all moments t <= k to zero with the ReLU
   correlation pinned to its pre-polish value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from . import flow, gauss
from .flow import Conserved, FlowError, FlowState, Selection
from .legendre import ProjectionPoly, lebesgue_integral, projection_poly
from .matcher import NewtonError, StageError
from .piecewise import MomentReport, PiecewiseSignFunction, moment_report, moments, relu_correlation

K_CAP = 8
EPS_ROUND = 0.02
DELTA = 1e-3
MAX_DRAWS = 200
EXT_SPACING = 0.1
EXT_RADIUS = 8.0
SUP_GRID = 10_001


class RoundingError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundedSeed:
    """``f'(z) = c (ReLU(z) - p(z)) / phi(z)`` on [-1, 1], zero elsewhere."""

    k: int
    c: float
    c_loose: float
    p: ProjectionPoly
    residual_sq: float  # int_{-1}^{1} (ReLU - p)^2 dz

    @property
    def p_coeffs(self) -> tuple[float, ...]:
        return self.p.coeffs

    @property
    def relu_corr(self) -> float:
        """``E[f' ReLU] = c int ReLU (ReLU - p) = c int (ReLU - p)^2``."""
        return self.c * self.residual_sq

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        inside = np.abs(z) <= 1.0
        zc = np.clip(z, -1.0, 1.0)
        val = self.c * (np.maximum(zc, 0.0) - self.p(zc)) / gauss.pdf(zc)
        out = np.where(inside, val, 0.0)
        return float(out) if out.ndim == 0 else out

    def cell_means(self, edges: np.ndarray) -> np.ndarray:
        """``int_cell f' phi / int_cell phi`` for the cells between consecutive ``edges`` in [-1, 1].

        The numerator is a Lebesgue integral of ``c (ReLU - p)``, done exactly.
        """
        lo, hi = edges[:-1], edges[1:]
        power = self.p.power_coeffs()
        relu = 0.5 * (np.maximum(hi, 0.0) ** 2 - np.maximum(lo, 0.0) ** 2)
        num = self.c * (relu - lebesgue_integral(power, lo, hi))
        den = gauss.partial_moments(0, lo, hi)[0]
        return np.clip(num / den, -1.0, 1.0)


def _ratio(p: ProjectionPoly):
    return lambda z: (max(z, 0.0) - p(z)) / gauss.pdf(z)


def bounded_seed(k: int, grid: int = SUP_GRID) -> BoundedSeed:
    """Seed with ``c`` the largest constant keeping ``|f'| <= 1`` on [-1, 1].

    The sup of ``|ReLU - p| / phi`` is taken over a dense grid (including 0, where the
    ReLU has its kink), then refined by a bounded scalar search around each smooth
    local maximum; a relative margin of 1e-9 keeps ``c`` conservative.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    p = projection_poly(k)
    g = _ratio(p)
    z = np.union1d(np.linspace(-1.0, 1.0, grid), [0.0])
    r = np.abs((np.maximum(z, 0.0) - p(z)) / gauss.pdf(z))
    sup = float(r.max())
    h = z[1] - z[0]
    # interior local maxima of |g| get a bounded refinement on their cell neighborhood
    peaks = np.flatnonzero((r[1:-1] >= r[:-2]) & (r[1:-1] >= r[2:])) + 1
    for i in peaks:
        lo, hi = max(z[i] - h, -1.0), min(z[i] + h, 1.0)
        if lo < 0.0 < hi:
            continue  # the kink itself is on the grid
        res = optimize.minimize_scalar(lambda x: -abs(g(x)), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-12})
        sup = max(sup, -float(res.fun))
    c = 1.0 / (sup * (1.0 + 1e-9))
    if not c > 0:
        raise ValueError("sup-norm normalizer is not positive")
    c_loose = gauss.pdf(1.0) / (2 * k * k + 1)
    return BoundedSeed(k, c, c_loose, p, p.residual_sq())


@dataclass(frozen=True)
class Rounding:
    f: PiecewiseSignFunction
    draws: int
    max_abs_moment: float
    relu_corr: float


def _extension(side: int, spacing: float, radius: float) -> np.ndarray:
    # half-width first piece so the alternating sum has no O(spacing) boundary term
    n = int(math.floor((radius - 1.0 - 0.5 * spacing) / spacing))
    pts = 1.0 + 0.5 * spacing + spacing * np.arange(max(n, 0) + 1)
    return side * pts


def _assemble(grid_signs: np.ndarray, edges: np.ndarray, ext: np.ndarray) -> PiecewiseSignFunction:
    """Breakpoints from cell values on [-1, 1] and the alternating extension outside.

    Each extension piece flips sign; the pieces adjacent to +-1 share the sign of the
    nearest grid cell, so no breakpoint sits at +-1 itself.
    """
    left = -ext[::-1]
    right = ext
    interior = edges[1:-1][grid_signs[1:] != grid_signs[:-1]]
    b = np.concatenate([left, interior, right])
    # sign of the far-left piece: the first cell's sign, flipped once per left breakpoint
    lead = int(grid_signs[0]) * (-1 if left.size % 2 else 1)
    return PiecewiseSignFunction.from_array(b, lead)


def rounding_grid(seed: BoundedSeed, delta: float = DELTA) -> tuple[np.ndarray, np.ndarray]:
    """Cell edges of the delta-grid on [-1, 1] and the probability that each cell is +1."""
    if not 0 < delta <= 0.5 or abs(round(2.0 / delta) * delta - 2.0) > 1e-9:
        raise ValueError("delta must divide 2 and lie in (0, 1/2]")
    n = int(round(2.0 / delta))
    edges = np.linspace(-1.0, 1.0, n + 1)
    return edges, 0.5 * (1.0 + seed.cell_means(edges))


def draw_cells(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.where(rng.random(prob.size) < prob, 1, -1)


def round_to_sign(seed: BoundedSeed, delta: float = DELTA, rng_seed: int = 0,
                  eps_round: float = EPS_ROUND, max_draws: int = MAX_DRAWS,
                  ext_spacing: float = EXT_SPACING, radius: float = EXT_RADIUS) -> Rounding:
    """Random +-1 function whose cell means on a delta-grid of [-1, 1] follow ``seed``.

    A cell is +1 with probability ``(1 + mean)/2``.  Draws repeat until the moments
    t <= k are within ``eps_round`` and the ReLU correlation is at least
    ``max(seed - eps_round, seed / 2)``, so it stays positive even when the seed's
    correlation is below ``eps_round``.
    """
    edges, prob = rounding_grid(seed, delta)
    ext = _extension(1, ext_spacing, radius)
    need = max(seed.relu_corr - eps_round, 0.5 * seed.relu_corr)
    rng = np.random.default_rng(rng_seed)
    for draw in range(1, max_draws + 1):
        f = _assemble(draw_cells(prob, rng), edges, ext)
        m = float(np.max(np.abs(moments(f, seed.k))))
        rc = relu_correlation(f)
        if m <= eps_round and rc >= need:
            return Rounding(f, draw, m, rc)
    raise RoundingError(f"no draw within eps_round={eps_round} after {max_draws} draws")


def positive_selection(k: int):
    """Phase A: the k+1 smallest positive breakpoints are free, the largest drives right."""

    def select(z: np.ndarray, lead: int) -> Optional[Selection]:
        pos = np.flatnonzero(z > 0)
        if pos.size <= k + 2:
            return None
        return Selection(pos[: k + 1], int(pos[-1]), 1.0)

    return select


def negative_selection(k: int):
    """Phase B: the smallest breakpoint drives left, the next k+1 negative ones are free."""

    def select(z: np.ndarray, lead: int) -> Optional[Selection]:
        neg = np.flatnonzero(z < 0)
        if neg.size <= k + 2:
            return None
        return Selection(neg[1 : k + 2], int(neg[0]), -1.0)

    return select


@dataclass(frozen=True)
class ReluReduction:
    state: FlowState
    zero_events: int
    history: tuple[tuple[int, int], ...] = ()  # (pieces before, pieces after) per reducing event


def reduce_relu(f: PiecewiseSignFunction, k: int, tol_merge: float = flow.TOL_MERGE,
                z_max: float = flow.Z_MAX, max_events: Optional[int] = None, observer=None,
                on_event=None) -> ReluReduction:
    """Flow ``f`` down to at most 2k+5 breakpoints conserving moments t <= k and E[f ReLU].

    Breakpoints that reach 0 during the positive phase are pinned there and take no
    further part; they do not reduce the piece count and are not counted as events
    for the monotonicity bookkeeping (``on_event`` only sees reducing events).
    """
    conserved = Conserved(k + 1, relu=True)
    state = FlowState(f, k)
    cap = 10 * f.piece_count if max_events is None else max_events
    zeros = 0
    history = []
    for select in (positive_selection(k), negative_selection(k)):
        while select(state.f.b, state.f.leading_sign) is not None:
            if state.events >= cap:
                raise FlowError(f"event cap {cap} reached with {state.f.piece_count} pieces left")
            before = state.f.piece_count
            state = flow.reduce_with(state, conserved, select, tol_merge=tol_merge, z_max=z_max,
                                     zero_barrier=True, observer=observer)
            if state.event and state.event[0] == "zero":
                zeros += 1
                continue
            history.append((before, state.f.piece_count))
            if on_event is not None:
                on_event(before, state)
    return ReluReduction(state, zeros, tuple(history))


def augmented_polish(f: PiecewiseSignFunction, k: int, tol: float = 1e-10, max_iter: int = 80,
                     relu_target: Optional[float] = None) -> PiecewiseSignFunction:
    """Minimum-norm Newton on all breakpoints: moments t <= k to 0, E[f ReLU] held fixed.

    The system has k+2 equations and up to 2k+5 unknowns; each step is the
    minimum-norm solution in column-scaled variables, damped to keep the
    breakpoints ordered and the residual decreasing.
    """
    z = f.b.copy()
    lead = f.leading_sign
    conserved = Conserved(k + 1, relu=True)
    target = np.zeros(k + 2)
    target[-1] = relu_correlation(f) if relu_target is None else relu_target
    scale = conserved.scale()

    def resid(zz):
        return (conserved.values(PiecewiseSignFunction.from_array(zz, lead)) - target) / scale

    r = resid(z)
    norm = float(np.max(np.abs(r)))
    increases = 0
    idx = np.arange(z.size)
    for _ in range(max_iter):
        if norm <= tol:
            break
        a = flow.signs_left(lead, idx)
        J = conserved.jacobian(z, a) / scale[:, None]
        cs = np.max(np.abs(J), axis=0)
        cs[cs == 0] = 1.0
        delta = np.linalg.lstsq(J / cs[None, :], -r, rcond=1e-13)[0] / cs
        step = 1.0
        accepted = False
        while step > 1e-6:
            trial = z + step * delta
            if np.all(np.diff(trial) > 0) and np.all(np.isfinite(trial)):
                rt = resid(trial)
                nt = float(np.max(np.abs(rt)))
                if nt < norm or step <= 1.0 / 64:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            raise NewtonError("ordering violation: no damped step keeps breakpoints ordered")
        increases = increases + 1 if nt >= norm else 0
        z, r, norm = trial, rt, nt
        if increases >= 3:
            raise NewtonError("residual increased over 3 consecutive iterations")
    if norm > tol:
        raise NewtonError(f"did not reach tol {tol:.1e}; residual {norm:.3g}")
    return PiecewiseSignFunction.from_array(z, lead)


def exact_scale(relu_corr: float, ulps: int = 4) -> tuple[float, float]:
    """``(C, r)`` with ``C = 0.5 / r`` and ``C * r == 0.5`` in floating point.

    ``r`` is ``relu_corr`` moved by at most ``ulps`` ulps; the product with a rounded
    quotient is otherwise off by an ulp in a few percent of cases.
    """
    r = relu_corr
    for _ in range(ulps + 1):
        for rr in (r, 2 * relu_corr - r):
            C = 0.5 / rr
            for cand in (C, np.nextafter(C, np.inf), np.nextafter(C, -np.inf)):
                if float(cand) * rr == 0.5:
                    return float(cand), float(rr)
        r = float(np.nextafter(r, np.inf))
    return 0.5 / relu_corr, relu_corr


@dataclass(frozen=True)
class ReluHardInstance:
    f: PiecewiseSignFunction
    k: int
    relu_corr: float
    scale_C: float
    report: MomentReport


@dataclass(frozen=True)
class ReluConstruction:
    instance: ReluHardInstance
    seed: BoundedSeed
    rounding: Rounding
    reduction: ReluReduction


def construct_relu_hard(k: int, tol: float = 1e-10, delta: float = DELTA, rng_seed: int = 0,
                        eps_round: float = EPS_ROUND, k_cap: int = K_CAP) -> ReluHardInstance:
    return construct_relu_detailed(k, tol, delta, rng_seed, eps_round, k_cap).instance


def construct_relu_detailed(k: int, tol: float = 1e-10, delta: float = DELTA, rng_seed: int = 0,
                            eps_round: float = EPS_ROUND, k_cap: int = K_CAP) -> ReluConstruction:
    if not 1 <= k <= k_cap:
        raise ValueError(f"k must lie in [1, {k_cap}]")
    try:
        seed = bounded_seed(k)
    except ValueError as err:
        raise StageError("seed", str(err)) from err
    try:
        rounding = round_to_sign(seed, delta, rng_seed, eps_round)
    except RoundingError as err:
        raise StageError("round", str(err)) from err
    try:
        red = reduce_relu(rounding.f, k)
    except FlowError as err:
        raise StageError("flow", str(err)) from err
    try:
        f = augmented_polish(red.state.f, k, tol)
    except NewtonError as err:
        raise StageError("newton", str(err)) from err
    report = moment_report(f, k, order=k + 1)
    if report.max_abs_moment > tol:
        raise StageError("verify", f"max moment {report.max_abs_moment:.3g} > tol {tol:.1e}")
    if not report.relu_corr > 0:
        raise StageError("verify", f"relu correlation {report.relu_corr:.3g} is not positive")
    C, rc = exact_scale(report.relu_corr)
    inst = ReluHardInstance(f, k, rc, C, report)
    return ReluConstruction(inst, seed, rounding, red)
