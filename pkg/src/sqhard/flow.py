"""Moment-conserving breakpoint flow shared by the halfspace and ReLU constructions.

A sign function with breakpoints ``z`` has ``dM_t/dz_j = 2 a_j z_j^t phi(z_j)`` where
``a_j`` is the value on the piece left of ``z_j``.  Moving one *driver* breakpoint at
unit speed and solving for the velocities of ``n`` *free* breakpoints so that the
moments of degree < n stay fixed is a Vandermonde-times-diagonal system; its
solution is Lagrange extrapolation:

    u_j = -speed * (a_d phi(z_d)) / (a_j phi(z_j)) * l_j(z_d),

with ``l_j`` the Lagrange basis on the free nodes.  For the ReLU construction all
moving nodes sit on one side of 0, where the ReLU-correlation gradient either
coincides with the degree-1 row or vanishes, so the same solve conserves it too.

The engine integrates this field with classical RK4 steps (rejected when the
conserved quantities drift by more than ``drift_step``), projects back to the level
set with a few Newton steps on the free nodes, and stops at the first event:
two adjacent breakpoints merging, a breakpoint escaping past ``z_max``, or (ReLU)
a breakpoint reaching 0, where it is pinned.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import gauss
from .piecewise import PiecewiseSignFunction, moments, relu_correlation

TOL_MERGE = 1e-8
Z_MAX = 12.0
DRIFT_STEP = 1e-9
STEP_BUDGET = 200_000
# a step may close at most this fraction of the predicted time to the nearest collision
CLOSE_FRACTION = 0.9
# scaled predictor error aimed at by the step controller, and the largest one handed
# to the Newton corrector
PREDICT_TARGET = 1e-6
PREDICT_REJECT = 1e-4


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class Selection:
    free: np.ndarray  # indices into the breakpoint array, increasing
    driver: int
    speed: float  # +1 moves the driver right, -1 left


@dataclass(frozen=True)
class Conserved:
    """Which quantities the flow keeps fixed: moments t < order, and optionally E[f ReLU]."""

    order: int
    relu: bool = False

    def values(self, f: PiecewiseSignFunction) -> np.ndarray:
        m = moments(f, self.order - 1)
        if self.relu:
            return np.append(m, relu_correlation(f))
        return m

    def increments(self, signs_left: np.ndarray, old: np.ndarray, new: np.ndarray) -> np.ndarray:
        """Change of the conserved vector when node j moves old_j -> new_j by at most 2, not across 0."""
        table = gauss.short_partial_moments(max(self.order - 1, 1), old, new)
        inc = table[: self.order] @ (2.0 * signs_left)
        if self.relu:
            # nodes never cross 0 here, so the ReLU part is the degree-1 row on positive nodes
            inc = np.append(inc, (table[1] * (old > 0)) @ (2.0 * signs_left))
        return inc

    def jacobian(self, z: np.ndarray, signs_left: np.ndarray) -> np.ndarray:
        """Columns dC/dz_j for the given nodes."""
        t = np.arange(self.order)[:, None]
        w = 2.0 * signs_left * gauss.pdf(z)
        J = (z[None, :] ** t) * w[None, :]
        if self.relu:
            J = np.vstack([J, np.where(z > 0, z, 0.0) * w])
        return J

    def scale(self) -> np.ndarray:
        # typical size of each conserved entry, used to express drift in comparable units
        s = np.array([max(1.0, gauss.normal_moment(t + t % 2)) for t in range(self.order)])
        return np.append(s, 1.0) if self.relu else s


@dataclass(frozen=True)
class FlowState:
    """Snapshot of a flow trajectory.

    ``event`` is None before the first event, else one of ``("merge", i)``,
    ``("escape", "left" | "right")`` or ``("zero", i)``.  ``target`` holds the conserved
    values at the start of the trajectory; ``max_drift`` is the largest deviation from
    it seen at any accepted step (after projection).
    """

    f: PiecewiseSignFunction
    k: int
    T: float = 0.0
    event: Optional[tuple] = None
    target: Optional[tuple] = None
    max_drift: float = 0.0
    steps: int = 0
    events: int = 0
    h: float = 0.0
    current: Optional[tuple] = None  # conserved values of ``f`` if already known


def signs_left(lead: int, idx: np.ndarray) -> np.ndarray:
    """Value of the piece immediately left of breakpoint ``idx``."""
    return lead * np.where(np.asarray(idx) % 2 == 0, 1.0, -1.0)


def _touching_gaps(nodes: np.ndarray, n: int) -> np.ndarray:
    """Indices i of the gaps (z_i, z_(i+1)) with at least one end in ``nodes``."""
    return np.unique(np.clip(np.concatenate([nodes - 1, nodes]), 0, max(n - 2, 0)))[: max(n - 1, 0)]


def lagrange_at(nodes: np.ndarray, x: float) -> np.ndarray:
    """Lagrange basis polynomials on ``nodes`` evaluated at ``x``."""
    n = nodes.size
    if n == 1:
        return np.ones(1)
    diff = nodes[:, None] - nodes[None, :]
    diff.flat[:: n + 1] = 1.0
    d = x - nodes
    if np.all(d != 0):
        return (np.prod(d) / d) / np.prod(diff, axis=1)
    out = np.zeros(n)
    out[d == 0] = 1.0
    return out


def velocity(zf: np.ndarray, zd: float, af: np.ndarray, ad: float, speed: float) -> np.ndarray:
    """Velocities of the free nodes when the driver moves at ``speed``."""
    ratio = np.exp(0.5 * (zf * zf - zd * zd))
    return -speed * (ad / af) * ratio * lagrange_at(zf, zd)


@dataclass
class _Engine:
    conserved: Conserved
    select: Callable[[np.ndarray, int], Optional[Selection]]
    tol_merge: float = TOL_MERGE
    z_max: float = Z_MAX
    drift_step: float = DRIFT_STEP
    zero_barrier: bool = False
    step_budget: int = STEP_BUDGET
    observer: Optional[Callable[[float, np.ndarray, int], None]] = None

    def run_to_event(self, state: FlowState) -> FlowState:
        z = state.f.b.copy()
        lead = state.f.leading_sign
        target = np.array(state.target) if state.target is not None else self.conserved.values(state.f)
        scale = self.conserved.scale()
        current = np.array(state.current) if state.current is not None else self.conserved.values(state.f)
        sel = self.select(z, lead)
        if sel is None:
            raise FlowError("not enough breakpoints to define a flow direction")
        moving = np.append(sel.free, sel.driver)
        gi = _touching_gaps(moving, z.size)
        a = signs_left(lead, moving)
        T = state.T
        h = 0.0  # the previous segment's step size says nothing about the new geometry
        steps = 0
        max_drift = state.max_drift

        def field(y):
            v = np.empty_like(y)
            v[:-1] = velocity(y[:-1], y[-1], a[:-1], a[-1], sel.speed)
            v[-1] = sel.speed
            return v

        while True:
            if steps >= self.step_budget:
                raise FlowError(f"step budget {self.step_budget} exhausted without an event")
            y = z[moving]
            v0 = field(y)
            cap = self._step_cap(z, moving, gi, v0)
            if h <= 0 or not np.isfinite(h):
                h = 0.25 * cap
            h = min(h, cap)
            rejected = 0
            while True:
                if rejected > 60:
                    raise FlowError("step size underflow without an event")
                y_new = self._rk4(field, y, v0, h)
                if not self._admissible(z, moving, gi, y, y_new):
                    h *= 0.5
                    rejected += 1
                    continue
                # the exact flow keeps the conserved values fixed, so the predictor's
                # change is its local error; Newton then corrects back to the level set
                predicted = current + self.conserved.increments(a, y, y_new)
                pred_err = float(np.max(np.abs(predicted - target) / scale))
                if pred_err > PREDICT_REJECT:
                    h *= 0.5
                    rejected += 1
                    continue
                trial = z.copy()
                trial[moving] = y_new
                corrected = predicted
                if pred_err > 1e-12:
                    corrected = self._project(trial, moving, gi, a, predicted, target, scale, iters=4)
                # per-step drift: how much this step moved the conserved values away from
                # the target (pulling an earlier deviation back does not count)
                growth = np.abs(corrected - target) - np.abs(current - target)
                if float(np.max(growth)) > self.drift_step:
                    h *= 0.5
                    rejected += 1
                    continue
                break
            z = trial
            current = corrected
            T += h
            steps += 1
            max_drift = max(max_drift, float(np.max(np.abs(current - target))))
            if self.observer is not None:
                self.observer(T, z.copy(), lead)
            # RK4 local error scales like h^5; aim the predictor error at PREDICT_TARGET
            grow = (PREDICT_TARGET / max(pred_err, 1e-300)) ** 0.2
            h *= min(4.0, max(0.5, 0.9 * grow))
            event = self._detect(z, moving, gi, sel)
            if event is not None:
                z, lead, event = self._apply(z, lead, event)
                f = PiecewiseSignFunction.from_array(z, lead)
                # the event itself moves the conserved values slightly; recompute on demand
                return FlowState(f, state.k, T, event, tuple(target.tolist()), max_drift,
                                 state.steps + steps, state.events + 1, h, None)

    @staticmethod
    def _rk4(field, y, k1, h):
        # oversized trial steps may sample the field near a collision; they are rejected later
        with np.errstate(all="ignore"):
            k2 = field(y + 0.5 * h * k1)
            k3 = field(y + 0.5 * h * k2)
            k4 = field(y + h * k3)
            return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def _step_cap(self, z, moving, gi, v):
        vel = np.zeros_like(z)
        vel[moving] = v
        gaps = z[gi + 1] - z[gi]
        closing = vel[gi] - vel[gi + 1]
        with np.errstate(divide="ignore"):
            t_close = np.where(closing > 0, gaps / closing, np.inf)
        cap = CLOSE_FRACTION * float(np.min(t_close)) if t_close.size else np.inf
        if self.zero_barrier:
            zm, vm = z[moving], v
            toward = ((zm > 0) & (vm < 0)) | ((zm < 0) & (vm > 0))
            if np.any(toward):
                cap = min(cap, CLOSE_FRACTION * float(np.min(np.abs(zm[toward] / vm[toward]))))
        # never let the fastest node travel more than 1 in one step
        cap = min(cap, 1.0 / float(np.max(np.abs(v))))
        return cap

    def _admissible(self, z, moving, gi, old, new):
        if not np.all(np.isfinite(new)):
            return False
        trial = z.copy()
        trial[moving] = new
        if np.any(trial[gi + 1] <= trial[gi]):
            return False
        if self.zero_barrier and np.any(np.sign(old) != np.sign(new)):
            return False
        # RK stages can sample a near-singular field; reject wild jumps
        return bool(np.max(np.abs(new - old)) <= 2.0)

    def _project(self, z, nodes, gi, a, current, target, scale, iters=3):
        """Minimum-norm Newton steps on ``nodes`` back to the conserved level set (in place)."""
        for _ in range(iters):
            r = current - target
            if np.max(np.abs(r) / scale) <= 1e-15:
                break
            zn = z[nodes]
            J = self.conserved.jacobian(zn, a) / scale[:, None]
            cs = np.max(np.abs(J), axis=0)
            cs[cs == 0] = 1.0
            delta = np.linalg.lstsq(J / cs[None, :], -r / scale, rcond=1e-12)[0] / cs
            if not np.all(np.isfinite(delta)) or np.max(np.abs(delta)) > 0.05:
                break  # a corrective step should be tiny; anything else is ill-conditioned
            trial = z.copy()
            trial[nodes] = zn + delta
            if np.any(trial[gi + 1] <= trial[gi]):
                break
            if self.zero_barrier and np.any(np.sign(trial[nodes]) != np.sign(zn)):
                break
            new = current + self.conserved.increments(a, zn, trial[nodes])
            if np.max(np.abs(new - target) / scale) >= np.max(np.abs(r) / scale):
                break
            z[nodes] = trial[nodes]
            current = new
        return current

    def _detect(self, z, moving, gi, sel):
        d = z[sel.driver]
        if sel.speed > 0 and d > self.z_max:
            return ("escape", "right")
        if sel.speed < 0 and d < -self.z_max:
            return ("escape", "left")
        if z[0] < -self.z_max and 0 in moving:
            return ("escape", "left")
        if z[-1] > self.z_max and (z.size - 1) in moving:
            return ("escape", "right")
        if gi.size:
            gaps = z[gi + 1] - z[gi]
            j = int(np.argmin(gaps))
            if gaps[j] < self.tol_merge:
                return ("merge", int(gi[j]))
        if self.zero_barrier:
            for j in moving:
                if z[j] != 0.0 and abs(z[j]) < self.tol_merge:
                    return ("zero", int(j))
        return None

    @staticmethod
    def _apply(z, lead, event):
        kind, where = event
        if kind == "merge":
            return np.delete(z, [where, where + 1]), lead, event
        if kind == "escape":
            if where == "left":
                return z[1:], -lead, event
            return z[:-1], lead, event
        z = z.copy()
        z[where] = 0.0
        return z, lead, event


def reduce_with(state: FlowState, conserved: Conserved, select, *, tol_merge=TOL_MERGE,
                z_max=Z_MAX, zero_barrier=False, observer=None, step_budget=STEP_BUDGET,
                project_after_event=True) -> FlowState:
    """Run one trajectory segment up to and including the next event."""
    eng = _Engine(conserved, select, tol_merge, z_max, DRIFT_STEP, zero_barrier, step_budget, observer)
    if state.target is None:
        state = replace(state, target=tuple(conserved.values(state.f).tolist()))
    out = eng.run_to_event(state)
    if project_after_event:
        out = reproject(out, conserved, select, zero_barrier=zero_barrier)
    return out


def reproject(state: FlowState, conserved: Conserved, select, zero_barrier=False) -> FlowState:
    """Pull the post-event function back onto the conserved level set."""
    z = state.f.b.copy()
    lead = state.f.leading_sign
    sel = select(z, lead)
    target = np.array(state.target)
    if sel is None or sel.free.size == 0:
        return replace(state, current=None)
    eng = _Engine(conserved, select, zero_barrier=zero_barrier)
    nodes = np.append(sel.free, sel.driver)
    a = signs_left(lead, nodes)
    current = conserved.values(state.f)
    scale = conserved.scale()
    current = eng._project(z, nodes, _touching_gaps(nodes, z.size), a, current, target, scale, iters=8)
    f = PiecewiseSignFunction.from_array(z, lead)
    drift = float(np.max(np.abs(current - target)))
    return replace(state, f=f, max_drift=max(state.max_drift, drift), current=tuple(current.tolist()))


def direction_residual(conserved: Conserved, z: np.ndarray, lead: int, sel: Selection) -> tuple[np.ndarray, float]:
    """Full velocity vector for ``sel`` and the relative residual of the linear system."""
    moving = np.append(sel.free, sel.driver)
    a = signs_left(lead, moving)
    u = np.zeros_like(z)
    u[sel.free] = velocity(z[sel.free], z[sel.driver], a[:-1], a[-1], sel.speed)
    u[sel.driver] = sel.speed
    # residual in a centred, scaled polynomial basis so that entries are O(1)
    zm = z[moving]
    c = 0.5 * (zm.min() + zm.max())
    s = max(0.5 * (zm.max() - zm.min()), 1e-300)
    q = ((zm - c) / s)[None, :] ** np.arange(conserved.order)[:, None]
    w = 2.0 * a * np.exp(-0.5 * (zm * zm - zm[-1] ** 2))  # phi scaled by phi(z_d)
    res = q @ (w * u[moving])
    ref = np.abs(q[:, -1] * w[-1])
    rel = float(np.max(np.abs(res)) / max(np.max(ref), 1e-300))
    return u, rel
