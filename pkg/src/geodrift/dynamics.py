"""Constrained geodesic flow integration in ambient coordinates.

The integrator is an adaptive 8th-order explicit Runge-Kutta (DOP853) driven
step by step so that after every accepted step the position can be projected
back to the surface and the velocity re-tangentialized; events are located on
the dense output of each step with Brent root refinement.  The extended
(nonautonomous) flow adds the time phase theta and its conjugate Theta, and
hands trajectories over to a Fermi-chart Hamiltonian integrator inside the
support of a time-periodic perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import DOP853
from scipy.optimize import brentq

from .errors import StepFailure, ChartExit
from .surfaces import project_to_surface, tangent_project

__all__ = [
    "IntegratorOptions",
    "ExtendedState",
    "Trajectory",
    "Event",
    "drive",
    "geodesic_rhs",
    "static_rhs",
    "variational_rhs",
    "integrate_static",
    "integrate_extended",
]


@dataclass
class IntegratorOptions:
    rel_tol: float = 1e-12
    abs_tol: float = 1e-12
    max_step: float = np.inf
    projection_enabled: bool = True
    max_steps: int = 5_000_000

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class ExtendedState:
    """One phase point (z, v, theta, Theta) of the extended flow."""

    z: np.ndarray
    v: np.ndarray
    theta: float = 0.0
    Theta: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.z, self.v, [self.theta, self.Theta]])

    @staticmethod
    def from_vector(y) -> "ExtendedState":
        y = np.asarray(y, dtype=float)
        return ExtendedState(z=y[0:3].copy(), v=y[3:6].copy(),
                             theta=float(y[6]), Theta=float(y[7]))

    def speed(self) -> float:
        return float(np.linalg.norm(self.v))

    def energy(self) -> float:
        """Kinetic Hamiltonian H = |v|^2 / 2 in the ambient (unperturbed) chart."""
        return 0.5 * float(np.dot(self.v, self.v))


@dataclass
class Event:
    """Scalar event g(t, y) whose zero crossings are located on dense output.

    direction: +1 detects only increasing crossings, -1 decreasing, 0 both.
    accept: optional predicate (t, y) -> bool applied at the refined root.
    """

    func: callable
    name: str = "event"
    terminal: bool = False
    direction: int = 0
    accept: callable = None


@dataclass
class _Segment:
    ta: float
    tb: float
    sol: object
    convert: callable = None  # raw y -> ambient 8-vector


class Trajectory:
    """Time-ordered samples of a flow, with optional dense interpolation.

    Samples are stored in the ambient extended representation
    (z0,z1,z2,v0,v1,v2,theta,Theta) plus a per-sample chart tag and the
    instantaneous Hamiltonian value.
    """

    def __init__(self):
        self._ts = []
        self._ys = []
        self._chart = []
        self._H = []
        self.segments: list[_Segment] = []
        self.event_hits: dict[str, list] = {}
        self._finalized = False

    def append(self, t, y8, H, chart=0):
        self._ts.append(float(t))
        self._ys.append(np.asarray(y8, dtype=float).copy())
        self._H.append(float(H))
        self._chart.append(int(chart))

    def extend_events(self, hits: dict):
        for k, v in hits.items():
            self.event_hits.setdefault(k, []).extend(v)

    def finalize(self):
        order = np.argsort(self._ts, kind="stable")
        self.ts = np.asarray(self._ts)[order]
        self.ys = np.asarray(self._ys)[order]
        self.H = np.asarray(self._H)[order]
        self.chart = np.asarray(self._chart)[order]
        if len(self.ts) > 1 and np.any(np.diff(self.ts) <= 0):
            keep = np.concatenate([[True], np.diff(self.ts) > 0])
            self.ts, self.ys = self.ts[keep], self.ys[keep]
            self.H, self.chart = self.H[keep], self.chart[keep]
        self._finalized = True
        return self

    @property
    def initial_state(self) -> ExtendedState:
        return ExtendedState.from_vector(self.ys[0])

    @property
    def final_state(self) -> ExtendedState:
        return ExtendedState.from_vector(self.ys[-1])

    def state_at_start_time(self, t0) -> ExtendedState:
        i = int(np.argmin(np.abs(self.ts - t0)))
        return ExtendedState.from_vector(self.ys[i])

    def evaluate(self, t) -> np.ndarray:
        """Dense-output evaluation, returned in the ambient representation."""
        for seg in self.segments:
            lo, hi = min(seg.ta, seg.tb), max(seg.ta, seg.tb)
            if lo - 1e-12 <= t <= hi + 1e-12:
                y = seg.sol(t)
                return seg.convert(y) if seg.convert else np.asarray(y)
        raise ValueError(f"t={t} outside stored dense segments")

    def to_csv(self, path):
        from .artifacts import write_csv
        header = ["t", "z0", "z1", "z2", "v0", "v1", "v2", "theta", "Theta", "H", "chart"]
        rows = []
        for t, y, H, c in zip(self.ts, self.ys, self.H, self.chart):
            rows.append(list(np.concatenate([[t], y, [H]])) + ["fermi" if c else "ambient"])
        write_csv(path, header, rows)


@dataclass
class DriveResult:
    ts: list
    ys: list
    t_end: float
    y_end: np.ndarray
    terminated_by: Event = None
    event_hits: dict = field(default_factory=dict)
    segments: list = field(default_factory=list)
    n_steps: int = 0


def drive(rhs, t0, y0, t1, opts: IntegratorOptions, project=None, events=(),
          keep_dense=False, event_subsamples=6):
    """Integrate rhs from (t0, y0) to t1 with per-step projection and events.

    Works in either time direction.  Terminal events stop integration at the
    refined crossing time.  Returns a DriveResult; raises StepFailure if the
    integrator cannot proceed.
    """
    y0 = np.asarray(y0, dtype=float)
    res = DriveResult(ts=[t0], ys=[y0.copy()], t_end=t0, y_end=y0.copy())
    for ev in events:
        res.event_hits[ev.name] = []
    if t1 == t0:
        return res

    solver = DOP853(rhs, t0, y0, t_bound=t1, rtol=opts.rel_tol,
                    atol=opts.abs_tol, max_step=opts.max_step)
    g_prev = [ev.func(t0, y0) for ev in events]

    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise StepFailure(f"integrator failed at t={solver.t_old}: {msg}")
        res.n_steps += 1
        if res.n_steps > opts.max_steps:
            raise StepFailure(f"exceeded {opts.max_steps} steps")
        t_prev, t_new = solver.t_old, solver.t
        sol = solver.dense_output()

        hit_terminal = None
        if events:
            tgrid = np.linspace(t_prev, t_new, event_subsamples)
            for iev, ev in enumerate(events):
                gvals = [g_prev[iev]]
                gvals += [ev.func(tt, sol(tt)) for tt in tgrid[1:]]
                for a in range(len(tgrid) - 1):
                    ga, gb = gvals[a], gvals[a + 1]
                    if not (np.isfinite(ga) and np.isfinite(gb)):
                        continue
                    if ga == 0.0:
                        continue
                    if ga * gb > 0.0:
                        continue
                    increasing = gb > ga
                    if ev.direction == +1 and not increasing:
                        continue
                    if ev.direction == -1 and increasing:
                        continue
                    if gb == 0.0:
                        t_ev = tgrid[a + 1]
                    else:
                        t_ev = brentq(lambda tt: ev.func(tt, sol(tt)),
                                      tgrid[a], tgrid[a + 1], xtol=1e-13, rtol=8.9e-16)
                    y_ev = np.asarray(sol(t_ev))
                    if ev.accept is not None and not ev.accept(t_ev, y_ev):
                        continue
                    res.event_hits[ev.name].append((t_ev, y_ev.copy()))
                    if ev.terminal and (hit_terminal is None or
                                        abs(t_ev - t_prev) < abs(hit_terminal[1] - t_prev)):
                        hit_terminal = (ev, t_ev, y_ev)
                g_prev[iev] = gvals[-1]

        if hit_terminal is not None:
            ev, t_ev, y_ev = hit_terminal
            if project is not None:
                y_ev = project(y_ev)
            res.ts.append(t_ev)
            res.ys.append(y_ev.copy())
            if keep_dense:
                res.segments.append(_Segment(t_prev, t_ev, sol))
            res.t_end, res.y_end, res.terminated_by = t_ev, y_ev.copy(), ev
            return res

        y_acc = solver.y
        if project is not None:
            y_proj = project(y_acc)
            if y_proj is not y_acc:
                solver.y = y_proj
                solver.f = np.asarray(rhs(solver.t, y_proj))
                y_acc = y_proj
        res.ts.append(t_new)
        res.ys.append(np.asarray(y_acc, dtype=float).copy())
        if keep_dense:
            res.segments.append(_Segment(t_prev, t_new, sol))

    res.t_end = solver.t
    res.y_end = np.asarray(solver.y, dtype=float).copy()
    return res


# -- geodesic vector fields ----------------------------------------------------


def geodesic_rhs(surface, z, v):
    """Constrained geodesic acceleration: dz = v, dv = lambda * grad_Q.

    lambda = -(v^T hess_Q v) / |grad_Q|^2 is the unique normal multiplier
    keeping (z, v) on the tangent bundle to second order.
    """
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    g = surface.grad_Q(z)
    gg = float(np.dot(g, g))
    if gg < 1e-24:
        from .errors import DegenerateGradient
        raise DegenerateGradient("grad_Q vanishes along the trajectory")
    lam = -float(v @ surface.hess_Q(z) @ v) / gg
    return v, lam * g


def static_rhs(surface):
    """rhs closure for the 6-dim ambient system y = (z, v)."""

    def rhs(t, y):
        z = y[0:3]
        v = y[3:6]
        g = surface.grad_Q(z)
        lam = -float(v @ surface.hess_Q(z) @ v) / float(np.dot(g, g))
        out = np.empty(6)
        out[0:3] = v
        out[3:6] = lam * g
        return out

    return rhs


def variational_rhs(surface, n_cols):
    """rhs closure for (z, v) plus n_cols variational columns (6 each).

    State layout: y = [z(3), v(3), W.flatten()] with W of shape (6, n_cols).
    """

    def rhs(t, y):
        z = y[0:3]
        v = y[3:6]
        W = y[6:].reshape(6, n_cols)
        g = surface.grad_Q(z)
        H = surface.hess_Q(z)
        gg = float(np.dot(g, g))
        Hv = H @ v
        vHv = float(np.dot(v, Hv))
        lam = -vHv / gg
        tvec = surface.hess_directional(z, v)
        Hg = H @ g
        dlam_dz = -tvec / gg + vHv * (2.0 * Hg) / gg**2
        dlam_dv = -2.0 * Hv / gg
        A21 = np.outer(g, dlam_dz) + lam * H
        A22 = np.outer(g, dlam_dv)
        out = np.empty_like(y)
        out[0:3] = v
        out[3:6] = lam * g
        W1, W2 = W[0:3], W[3:6]
        dW = np.empty_like(W)
        dW[0:3] = W2
        dW[3:6] = A21 @ W1 + A22 @ W2
        out[6:] = dW.reshape(-1)
        return out

    return rhs


def _ambient_projector(surface, speed):
    def project(y):
        out = y.copy()
        z = project_to_surface(surface, y[0:3])
        v = tangent_project(surface, z, y[3:6])
        nv = np.linalg.norm(v)
        if nv > 0 and speed is not None:
            v = v * (speed / nv)
        out[0:3] = z
        out[3:6] = v
        return out

    return project


# -- public integration entry points -------------------------------------------


def _as_zv(state):
    if isinstance(state, ExtendedState):
        return state.z, state.v, state.theta, state.Theta
    z, v = state
    return np.asarray(z, dtype=float), np.asarray(v, dtype=float), 0.0, 0.0


def integrate_static(surface, state, T, opts: IntegratorOptions = None,
                     events=(), keep_dense=False):
    """Integrate the autonomous constrained geodesic flow for time T.

    T may be negative.  After each accepted step the position is projected to
    the surface and the velocity re-tangentialized and rescaled to the initial
    speed (speed is a first integral of the unperturbed flow).
    """
    opts = opts or IntegratorOptions()
    z, v, theta0, Theta0 = _as_zv(state)
    speed = float(np.linalg.norm(v))
    project = _ambient_projector(surface, speed) if opts.projection_enabled else None
    res = drive(static_rhs(surface), 0.0, np.concatenate([z, v]), T, opts,
                project=project, events=events, keep_dense=keep_dense)
    traj = Trajectory()
    for t, y in zip(res.ts, res.ys):
        y8 = np.concatenate([y, [theta0 + t, Theta0]])
        traj.append(t, y8, 0.5 * float(np.dot(y[3:6], y[3:6])), chart=0)
    traj.extend_events({k: [(t, np.concatenate([y, [theta0 + t, Theta0]]))
                            for (t, y) in v_] for k, v_ in res.event_hits.items()})
    for seg in res.segments:
        seg.convert = _static_to_ambient8(theta0, Theta0)
        traj.segments.append(seg)
    traj.terminated_by = res.terminated_by
    return traj.finalize()


def _static_to_ambient8(theta0, Theta0):
    def conv(y, _t=None):
        return np.concatenate([y, [theta0, Theta0]])
    return conv


def integrate_extended(surface, perturbation, epsilon, state, T,
                       opts: IntegratorOptions = None, keep_dense=False,
                       extra_events=()):
    """Integrate the extended flow (z, v, theta, Theta) for time T.

    Outside the perturbation's support this is the static geodesic flow with
    theta' = 1, Theta' = 0.  Inside the Fermi chart of an active perturbation
    the trajectory is converted to chart coordinates and the nonautonomous
    Hamiltonian H = g_eps(x, theta)(y, y)/2 + Theta is integrated, conserving
    H + Theta across the full trajectory.

    `perturbation` may be None (or epsilon == 0) for the unperturbed extended
    flow.  `extra_events` are evaluated in ambient mode only.
    """
    opts = opts or IntegratorOptions()
    if isinstance(state, ExtendedState):
        st = state
    else:
        z, v, theta0, Theta0 = _as_zv(state)
        st = ExtendedState(z, v, theta0, Theta0)

    hooks = None
    if perturbation is not None and epsilon != 0.0:
        hooks = perturbation.flow_hooks(surface, epsilon)

    traj = Trajectory()
    t = 0.0
    y = st.as_vector()
    direction = 1.0 if T > 0 else -1.0
    traj.append(t, y, 0.5 * float(np.dot(y[3:6], y[3:6])), chart=0)

    def ambient_rhs(tt, yy):
        out = np.empty(8)
        z = yy[0:3]
        v = yy[3:6]
        g = surface.grad_Q(z)
        lam = -float(v @ surface.hess_Q(z) @ v) / float(np.dot(g, g))
        out[0:3] = v
        out[3:6] = lam * g
        out[6] = 1.0
        out[7] = 0.0
        return out

    def ambient_project_factory(speed):
        base = _ambient_projector(surface, speed)

        def project(yy):
            out = yy.copy()
            out[0:6] = base(yy[0:6].copy())[0:6]
            return out

        return project

    guard = 0
    while (T - t) * direction > 1e-13:
        guard += 1
        if guard > 10000:
            raise StepFailure("chart switching did not terminate")
        in_chart = False
        if hooks is not None:
            x_here = hooks.locate(y[0:3])
            in_chart = x_here is not None and hooks.inside_engage(x_here)
        if not in_chart:
            events = list(extra_events)
            if hooks is not None:
                events.append(Event(func=hooks.entry_event, name="_chart_entry",
                                    terminal=True, direction=-1))
            speed = float(np.linalg.norm(y[3:6]))
            project = ambient_project_factory(speed) if opts.projection_enabled else None
            res = drive(ambient_rhs, t, y, T, opts, project=project,
                        events=events, keep_dense=keep_dense)
            for tt, yy in zip(res.ts[1:], res.ys[1:]):
                traj.append(tt, yy, 0.5 * float(np.dot(yy[3:6], yy[3:6])), chart=0)
            traj.extend_events({k: v for k, v in res.event_hits.items()
                                if not k.startswith("_chart")})
            traj.segments.extend(res.segments)
            t, y = res.t_end, res.y_end
            if res.terminated_by is None or res.terminated_by.name != "_chart_entry":
                break
        else:
            ych = hooks.enter(y)
            chart_opts = IntegratorOptions(
                rel_tol=max(opts.rel_tol, hooks.chart_rel_tol),
                abs_tol=max(opts.abs_tol, hooks.chart_abs_tol),
                max_step=min(opts.max_step, hooks.chart_max_step),
                projection_enabled=False, max_steps=opts.max_steps)
            res = drive(hooks.rhs, t, ych, T, chart_opts, project=None,
                        events=[Event(func=hooks.exit_event, name="_chart_exit",
                                      terminal=True, direction=+1)],
                        keep_dense=keep_dense)
            for tt, yy in zip(res.ts[1:], res.ys[1:]):
                y8, H = hooks.sample_to_ambient(yy)
                traj.append(tt, y8, H, chart=1)
            for seg in res.segments:
                seg.convert = hooks.dense_to_ambient
                traj.segments.append(seg)
            t = res.t_end
            if hooks.outside_validity(res.y_end):
                raise ChartExit("trajectory left the Fermi chart validity domain")
            y = hooks.leave(res.y_end)
            if res.terminated_by is None:
                # reached final time inside the chart
                traj._ys[-1] = y.copy()
                break
    return traj.finalize()
