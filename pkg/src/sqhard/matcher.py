"""Halfspace-hard sign functions: at most k+1 pieces with E[f(z) z^t] = 0 for t < k.

Pipeline: an alternating seed with small low-degree moments, the moment-conserving
flow that removes breakpoints one event at a time, and a Newton polish that drives
the remaining k breakpoints to an exact zero of the moment map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import flow, gauss
from .flow import Conserved, FlowError, FlowState, Selection
from .piecewise import (MomentReport, PiecewiseSignFunction, best_halfspace, moment_report,
                        moments)

K_CAP = 12
NEWTON_BASIN = 0.05


class SeedError(ValueError):
    def __init__(self, message: str, t: int):
        super().__init__(message)
        self.t = t


class NewtonError(RuntimeError):
    pass


class StageError(RuntimeError):
    """A construction stage failed; ``stage`` names it and ``__cause__`` holds the reason."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def recipe_spacing(k: int, eps: float) -> float:
    return eps ** ((k + 1) / 2) / k**k


def recipe_radius(k: int, eps: float) -> float:
    return min(eps ** (-k), gauss.Z_CLAMP)


def seed_piece_count(k: int, eps: float, spacing: Optional[float] = None,
                     radius: Optional[float] = None) -> int:
    """Pieces of ``alternating_seed(k, eps, spacing, radius)`` without building it."""
    s = recipe_spacing(k, eps) if spacing is None else float(spacing)
    R = recipe_radius(k, eps) if radius is None else float(radius)
    return 2 * int(math.floor(R / s + 1e-9)) + 2


def alternating_seed(k: int, eps: float, spacing: Optional[float] = None,
                     radius: Optional[float] = None) -> PiecewiseSignFunction:
    """Sign function alternating on a grid of width ``spacing`` over [-radius, radius].

    Defaults follow the textbook recipe ``spacing = eps^((k+1)/2) / k^k`` and
    ``radius = eps^-k`` capped at the density clamp.  Breakpoints sit at ``i * spacing``
    for ``|i| <= radius / spacing``, an odd count, so the function is odd (every even
    moment vanishes), +1 on the far left and -1 on the far right.  Moments t < k are
    then measured; any above ``eps`` raises SeedError.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < eps <= 0.5:
        raise ValueError("eps must lie in (0, 1/2]")
    s = recipe_spacing(k, eps) if spacing is None else float(spacing)
    R = recipe_radius(k, eps) if radius is None else float(radius)
    n = int(math.floor(R / s + 1e-9))
    f = PiecewiseSignFunction.from_array(np.arange(-n, n + 1) * s, 1)
    m = moments(f, k - 1)
    bad = np.flatnonzero(np.abs(m) > eps)
    if bad.size:
        t = int(bad[0])
        raise SeedError(f"seed moment t={t} is {m[t]:.3g} > eps={eps}", t)
    return f


def auto_seed(k: int, eps: float, radius: float = 8.0, max_halvings: int = 8) -> PiecewiseSignFunction:
    """Coarsest alternating seed (spacing 1/2, 1/4, ...) whose moments t < k are within eps."""
    R = min(eps ** (-k), radius)
    s = 0.5
    last: Optional[SeedError] = None
    for _ in range(max_halvings):
        try:
            return alternating_seed(k, eps, spacing=s, radius=R)
        except SeedError as err:
            last = err
            s /= 2
    assert last is not None
    raise last


@dataclass(frozen=True)
class DirectionSolve:
    free_indices: tuple[int, ...]
    driver_index: int
    u: np.ndarray
    residual: float


def ltf_selection(k: int) -> Callable[[np.ndarray, int], Optional[Selection]]:
    """First k breakpoints free, last breakpoint drives to the right."""

    def select(z: np.ndarray, lead: int) -> Optional[Selection]:
        if z.size < k + 1:
            return None
        return Selection(np.arange(k), z.size - 1, 1.0)

    return select


def flow_direction(f: PiecewiseSignFunction, k: int, tol_merge: float = flow.TOL_MERGE) -> DirectionSolve:
    """Velocity keeping E[f z^t], t < k, fixed while the last breakpoint moves at speed 1."""
    z = f.b
    if z.size < k + 1:
        raise ValueError(f"need at least k+1 = {k + 1} breakpoints, got {z.size}")
    gaps = np.diff(z)
    if gaps.size and np.min(gaps) <= tol_merge:
        raise FlowError(f"breakpoints {int(np.argmin(gaps))} and {int(np.argmin(gaps)) + 1} "
                        "coincide within tol_merge: merge event")
    sel = ltf_selection(k)(z, f.leading_sign)
    u, res = flow.direction_residual(Conserved(k), z, f.leading_sign, sel)
    return DirectionSolve(tuple(int(i) for i in sel.free), int(sel.driver), u, res)


def reduce_once(state: FlowState, tol_merge: float = flow.TOL_MERGE, z_max: float = flow.Z_MAX,
                observer=None) -> FlowState:
    """Integrate the flow from ``state`` to its next event."""
    if state.f.piece_count <= state.k + 1:
        raise ValueError("already at most k+1 pieces")
    return flow.reduce_with(state, Conserved(state.k), ltf_selection(state.k), tol_merge=tol_merge,
                            z_max=z_max, observer=observer)


def reduce_to_order(f: PiecewiseSignFunction, k: int, tol_merge: float = flow.TOL_MERGE,
                    z_max: float = flow.Z_MAX, max_events: Optional[int] = None,
                    observer=None, on_event=None) -> FlowState:
    """Repeat ``reduce_once`` until at most k+1 pieces remain."""
    state = FlowState(f, k)
    cap = 10 * f.piece_count if max_events is None else max_events
    while state.f.piece_count > k + 1:
        if state.events >= cap:
            raise FlowError(f"event cap {cap} reached with {state.f.piece_count} pieces left")
        before = state.f.piece_count
        state = reduce_once(state, tol_merge, z_max, observer)
        if on_event is not None:
            on_event(before, state)
    return state


def _solve_scaled(J: np.ndarray, r: np.ndarray) -> np.ndarray:
    rs = np.max(np.abs(J), axis=1)
    rs[rs == 0] = 1.0
    cs = np.max(np.abs(J / rs[:, None]), axis=0)
    cs[cs == 0] = 1.0
    A = (J / rs[:, None]) / cs[None, :]
    return np.linalg.lstsq(A, r / rs, rcond=None)[0] / cs


def newton_polish(f: PiecewiseSignFunction, k: int, tol: float = 1e-10, basin: float = NEWTON_BASIN,
                  max_iter: int = 60, frozen: Optional[int] = None) -> PiecewiseSignFunction:
    """Drive E[f z^t], t < k, to zero by Newton's method on the breakpoints.

    ``f`` must have k breakpoints, or k+1 with index ``frozen`` held fixed.  Steps are
    damped to keep the breakpoints ordered and the residual decreasing; three
    consecutive residual increases count as divergence.
    """
    z = f.b.copy()
    lead = f.leading_sign
    free = np.arange(z.size)
    if frozen is not None:
        free = np.delete(free, frozen)
    if free.size != k:
        raise NewtonError(f"need exactly k={k} free breakpoints, have {free.size}")
    if k == 0:
        return f

    def resid(zz):
        return moments(PiecewiseSignFunction.from_array(zz, lead), k - 1)

    r = resid(z)
    norm = float(np.max(np.abs(r)))
    if norm > basin:
        raise NewtonError(f"max moment {norm:.3g} is outside the Newton basin {basin}")
    increases = 0
    for _ in range(max_iter):
        if norm <= tol:
            break
        a = flow.signs_left(lead, free)
        J = Conserved(k).jacobian(z[free], a)
        delta = _solve_scaled(J, -r)
        step = 1.0
        accepted = False
        while step > 1e-6:
            trial = z.copy()
            trial[free] = z[free] + step * delta
            if np.all(np.diff(trial) > 0):
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


@dataclass(frozen=True)
class LtfConstruction:
    f: PiecewiseSignFunction
    report: MomentReport
    negated: bool
    seed_pieces: int
    events: int
    flow_drift: float
    halfspace: tuple[float, float, int]


def construct_ltf_hard(k: int, tol: float = 1e-10, seed_eps: float = 1e-3,
                       tol_merge: float = flow.TOL_MERGE, z_max: float = flow.Z_MAX,
                       k_cap: int = K_CAP) -> tuple[PiecewiseSignFunction, MomentReport]:
    c = construct_ltf_detailed(k, tol, seed_eps, tol_merge, z_max, k_cap)
    return c.f, c.report


def construct_ltf_detailed(k: int, tol: float = 1e-10, seed_eps: float = 1e-3,
                           tol_merge: float = flow.TOL_MERGE, z_max: float = flow.Z_MAX,
                           k_cap: int = K_CAP) -> LtfConstruction:
    """Sign function with at most k+1 pieces and E[f z^t] = 0 (to ``tol``) for t < k.

    The result is normalized to a negative leading sign; ``negated`` records whether
    the raw pipeline output had to be flipped.
    """
    if not 1 <= k <= k_cap:
        raise ValueError(f"k must lie in [1, {k_cap}]")
    if k == 1:
        f = PiecewiseSignFunction((0.0,), -1)
        return LtfConstruction(f, moment_report(f, 1), False, 2, 0, 0.0, best_halfspace(f))

    spacing_scale = 1.0
    last_error: Optional[Exception] = None
    for attempt in range(4):
        try:
            seed = auto_seed(k, seed_eps)
        except SeedError as err:
            raise StageError("seed", str(err)) from err
        if spacing_scale != 1.0:
            s = float(seed.b[1] - seed.b[0]) * spacing_scale
            seed = alternating_seed(k, 0.5, spacing=s, radius=float(seed.b[-1]) + 1e-12)
        try:
            state = reduce_to_order(seed, k, tol_merge, z_max)
        except FlowError as err:
            raise StageError("flow", str(err)) from err
        if len(state.f.breakpoints) == k:
            break
        # a final merge left fewer than k breakpoints; refine the seed and retry
        last_error = StageError("flow", f"flow ended with {len(state.f.breakpoints)} < k breakpoints")
        spacing_scale *= 0.5
    else:
        assert last_error is not None
        raise last_error

    try:
        f = newton_polish(state.f, k, tol)
    except NewtonError as err:
        raise StageError("newton", str(err)) from err
    negated = f.leading_sign != -1
    if negated:
        f = -f
    report = moment_report(f, k)
    if report.max_abs_moment > tol:
        raise StageError("verify", f"max moment {report.max_abs_moment:.3g} > tol {tol:.1e}")
    return LtfConstruction(f, report, negated, seed.piece_count, state.events, state.max_drift,
                           best_halfspace(f))

