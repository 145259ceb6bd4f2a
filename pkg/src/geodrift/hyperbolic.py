"""Hyperbolic closed geodesics, their invariant manifolds, and homoclinics.

The hyperbolic closed geodesic of the default bumped-ellipsoid surface lies
in the plane {z_1 = 0}, so the working Poincare section fixes one of the
in-plane coordinates: {z_2 = 0, v_2 > 0}.  All section machinery is generic
over coordinate indices and configurable for other surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .dynamics import (Event, IntegratorOptions, drive, static_rhs,
                       variational_rhs, integrate_static)
from .errors import (NewtonDiverged, NoHomoclinicFound, NotHyperbolic,
                     SectionMiss, TangencySuspected)
from .surfaces import project_to_surface, tangent_project

_TWO_PI = 2.0 * np.pi


@dataclass
class SectionConfig:
    axis: int = 2          # section plane {z_axis = 0}, crossings with v_axis > 0
    param_index: int = 1   # section coordinates are (z_param, v_param)


class PoincareSection:
    """Transverse section {z_k = 0, v_k > 0} inside the unit tangent bundle.

    Local coordinates near the closed geodesic's crossing are u = (z_m, v_m);
    the remaining position coordinate is solved from Q = 0 on the branch
    z_l > 0, the remaining velocity components from tangency and unit speed
    with v_k > 0.
    """

    def __init__(self, surface, cfg: SectionConfig = None):
        cfg = cfg or SectionConfig()
        self.surface = surface
        self.k = cfg.axis
        self.m = cfg.param_index
        self.l = ({0, 1, 2} - {self.k, self.m}).pop()
        self.cfg = cfg

    def _solve_zl(self, zm):
        z = np.zeros(3)
        z[self.m] = zm
        zl = float(getattr(self.surface, "axes", (1.0, 1.0, 1.0))[self.l])
        for _ in range(60):
            z[self.l] = zl
            q = self.surface.Q(z)
            if abs(q) < 1e-14:
                break
            zl -= q / self.surface.grad_Q(z)[self.l]
        z[self.l] = zl
        return z

    def embed(self, u):
        """Section coordinates -> full unit-speed state (z, v) with v_k > 0."""
        u1, u2 = float(u[0]), float(u[1])
        z = self._solve_zl(u1)
        g = self.surface.grad_Q(z)
        gk, gl, gm = g[self.k], g[self.l], g[self.m]
        a = gk**2 + gl**2
        b = 2.0 * gm * gk * u2
        c = (gm**2 + gl**2) * u2**2 - gl**2
        disc = b * b - 4.0 * a * c
        if disc < 0:
            raise SectionMiss("no unit-speed state with v_k > 0 at these coordinates")
        vk = (-b + np.sqrt(disc)) / (2.0 * a)
        if vk <= 0:
            raise SectionMiss("branch v_k > 0 not available")
        vl = -(gm * u2 + gk * vk) / gl
        v = np.zeros(3)
        v[self.k], v[self.l], v[self.m] = vk, vl, u2
        return z, v

    def embed_jacobian(self, u):
        """d(embed)/du as two 6-vector columns (analytic implicit derivatives)."""
        z, v = self.embed(u)
        g = self.surface.grad_Q(z)
        H = self.surface.hess_Q(z)
        dz1 = np.zeros(3)
        dz1[self.m] = 1.0
        dz1[self.l] = -g[self.m] / g[self.l]
        A = np.vstack([g, v, np.eye(3)[self.m]])
        dv1 = np.linalg.solve(A, np.array([-(H @ dz1) @ v, 0.0, 0.0]))
        dv2 = np.linalg.solve(A, np.array([0.0, 0.0, 1.0]))
        return z, v, np.concatenate([dz1, dv1]), np.concatenate([np.zeros(3), dv2])

    def coords(self, y):
        """Local section coordinates (z_m, v_m) of a full state."""
        return np.array([y[self.m], y[3 + self.m]])

    def in_chart_branch(self, y):
        axes = getattr(self.surface, "axes", (1.0, 1.0, 1.0))
        return y[self.l] > 0.3 * axes[self.l]

    def crossing_event(self, count_to=None, extra_accept=None, name="section"):
        """Event firing at crossings of {z_k = 0} with v_k > 0.

        count_to: if given, the event is terminal at the count_to-th crossing.
        extra_accept: stateful predicate(t, y) consulted after the v_k filter;
          when it returns True the event is terminal.
        """
        k = self.k
        counter = {"n": 0}

        def accept(t, y):
            if y[3 + k] <= 0:
                return False
            if extra_accept is not None:
                return extra_accept(t, y)
            counter["n"] += 1
            if count_to is None:
                return True
            return counter["n"] >= count_to

        return Event(func=lambda t, y: y[k], name=name, direction=0,
                     terminal=(count_to is not None) or (extra_accept is not None),
                     accept=accept)

    def return_map(self, u, n=1, opts: IntegratorOptions = None, t_max=None):
        """n-th return of the section map; returns (u', t_return, y')."""
        opts = opts or IntegratorOptions()
        z, v = self.embed(u)
        t_max = t_max if t_max is not None else 20.0 * n + 50.0
        res = drive(static_rhs(self.surface), 0.0, np.concatenate([z, v]), t_max,
                    opts, events=[self.crossing_event(count_to=n)])
        if res.terminated_by is None:
            raise SectionMiss(f"no {n}-th section return within t={t_max}")
        return self.coords(res.y_end), res.t_end, res.y_end

    def return_map_with_jacobian(self, u, opts: IntegratorOptions = None):
        """First return together with the 2x2 differential of the section map."""
        opts = opts or IntegratorOptions()
        z, v, c1, c2 = self.embed_jacobian(u)
        y0 = np.concatenate([z, v, np.column_stack([c1, c2]).reshape(-1)])
        rhs = variational_rhs(self.surface, 2)
        counter = {"n": 0}

        def accept(t, y):
            if y[3 + self.k] <= 0:
                return False
            counter["n"] += 1
            return True

        ev = Event(func=lambda t, y: y[self.k], name="section", direction=0,
                   terminal=True, accept=accept)
        res = drive(rhs, 0.0, y0, 100.0, opts, events=[ev])
        if res.terminated_by is None:
            raise SectionMiss("no section return within t=100")
        y = res.y_end
        state = y[0:6]
        W = y[6:].reshape(6, 2)
        F = static_rhs(self.surface)(res.t_end, state)
        vk = F[self.k]
        D = np.empty((2, 2))
        for j in range(2):
            w = W[:, j] - F * (W[self.k, j] / vk)
            D[0, j] = w[self.m]
            D[1, j] = w[3 + self.m]
        return self.coords(state), res.t_end, state, D


# -- closed geodesics -----------------------------------------------------------


@dataclass
class ClosedGeodesic:
    """Hyperbolic closed geodesic with Floquet data and arclength table."""

    surface: object
    section: PoincareSection
    fixed_point_u: np.ndarray
    state0: np.ndarray            # (z, v) at arclength 0 (on the section)
    period: float                 # unit-speed period == arclength
    length: float
    phase_scale: float            # 2 pi / length
    floquet_multiplier: float
    unstable_dir: np.ndarray      # (2,) section coordinates
    stable_dir: np.ndarray
    DR: np.ndarray
    s_table: np.ndarray = field(repr=False, default=None)
    zv_table: np.ndarray = field(repr=False, default=None)
    _spline: object = field(repr=False, default=None)

    def build_table(self, n=2048, opts: IntegratorOptions = None):
        opts = opts or IntegratorOptions()
        traj = integrate_static(self.surface, (self.state0[0:3], self.state0[3:6]),
                                self.period, opts, keep_dense=True)
        s = np.linspace(0.0, self.period, n + 1)
        zv = np.empty((n + 1, 6))
        for i, t in enumerate(s[1:-1], start=1):
            zv[i] = traj.evaluate(t)[0:6]
        zv[0] = self.state0
        zv[-1] = zv[0]
        self.s_table, self.zv_table = s, zv
        self._spline = CubicSpline(s, zv, bc_type="periodic")
        return self

    def state_at_arclength(self, s):
        """(z, v) on the orbit at arclength s past the section crossing."""
        y = self._spline(np.mod(s, self.length))
        return y[0:3], y[3:6]

    def gamma(self, phi):
        z, _ = self.state_at_arclength(phi / self.phase_scale)
        return z

    def gamma_prime(self, phi):
        _, v = self.state_at_arclength(phi / self.phase_scale)
        return v

    def nearest_arclength(self, z, v=None):
        """Arclength of the closest table point to z (position Newton refine)."""
        d2 = np.sum((self.zv_table[:-1, 0:3] - z) ** 2, axis=1)
        if v is not None:
            d2 = d2 + np.sum((self.zv_table[:-1, 3:6] - v) ** 2, axis=1)
        s = self.s_table[int(np.argmin(d2))]
        for _ in range(8):
            zi, vi = self.state_at_arclength(s)
            ds = -float(np.dot(zi - z, vi))
            s += ds
            if abs(ds) < 1e-13:
                break
        return np.mod(s, self.length)

    def distance(self, z, v=None):
        s = self.nearest_arclength(z, v=v)
        zi, vi = self.state_at_arclength(s)
        d2 = float(np.sum((zi - z) ** 2))
        if v is not None:
            d2 += float(np.sum((vi - v) ** 2))
        return np.sqrt(d2)

    def distances_to_curve(self, points, chunk=512):
        """Coarse min-distances from an (N,3) array to the orbit's position table."""
        pts = np.asarray(points)
        gamma_pts = self.zv_table[:-1, 0:3]
        out = np.empty(len(pts))
        for i in range(0, len(pts), chunk):
            block = pts[i:i + chunk]
            d2 = np.sum((block[:, None, :] - gamma_pts[None, :, :]) ** 2, axis=2)
            out[i:i + chunk] = np.sqrt(d2.min(axis=1))
        return out


def find_closed_geodesic(surface, guess=None, section_cfg: SectionConfig = None,
                         opts: IntegratorOptions = None, tol=1e-12, max_iter=30,
                         table_n=2048) -> ClosedGeodesic:
    """Newton solve for a hyperbolic closed geodesic on the Poincare section.

    The differential of the return map comes from variational equations
    integrated alongside the flow.  Raises NewtonDiverged or NotHyperbolic.
    """
    opts = opts or IntegratorOptions()
    section = PoincareSection(surface, section_cfg)
    u = np.zeros(2) if guess is None else np.asarray(guess, dtype=float)
    T = None
    D = None
    for _ in range(max_iter):
        u1, T, ystar, D = section.return_map_with_jacobian(u, opts)
        F = u1 - u
        if not np.all(np.isfinite(F)):
            raise NewtonDiverged("return map produced non-finite values")
        if np.linalg.norm(F) <= tol:
            break
        try:
            du = np.linalg.solve(D - np.eye(2), -F)
        except np.linalg.LinAlgError as e:
            raise NewtonDiverged(f"singular Newton system: {e}")
        if np.linalg.norm(du) > 0.5:
            raise NewtonDiverged("Newton step too large; bad initial guess")
        u = u + du
    else:
        raise NewtonDiverged(f"no convergence to tol={tol} in {max_iter} iterations")

    evals, evecs = np.linalg.eig(D)
    order = np.argsort(-np.abs(evals))
    lam = evals[order[0]]
    if abs(lam.imag) > 1e-8 * abs(lam) or abs(lam.real) <= 1.0 + 1e-6:
        raise NotHyperbolic(f"leading multiplier {lam} too close to the unit circle")

    def _orient(d):
        d = np.real(d)
        d = d / np.linalg.norm(d)
        i = int(np.argmax(np.abs(d)))
        return d if d[i] > 0 else -d

    z, v = section.embed(u)
    z = project_to_surface(surface, z)
    v = tangent_project(surface, z, v)
    v /= np.linalg.norm(v)
    geo = ClosedGeodesic(
        surface=surface, section=section, fixed_point_u=u,
        state0=np.concatenate([z, v]), period=T, length=T,
        phase_scale=_TWO_PI / T, floquet_multiplier=float(lam.real),
        unstable_dir=_orient(evecs[:, order[0]]),
        stable_dir=_orient(evecs[:, order[1]]), DR=D)
    return geo.build_table(n=table_n, opts=opts)


def full_monodromy(surface, geodesic: ClosedGeodesic,
                   opts: IntegratorOptions = None) -> np.ndarray:
    """6x6 monodromy of the ambient variational equations over one period.

    Independent oracle for the reduced Floquet data: the spectrum contains the
    pair {lambda_F, 1/lambda_F} plus trivial multipliers from the constraint
    and flow directions.
    """
    opts = opts or IntegratorOptions()
    y0 = np.concatenate([geodesic.state0, np.eye(6).reshape(-1)])
    res = drive(variational_rhs(surface, 6), 0.0, y0, geodesic.period, opts)
    return res.y_end[6:].reshape(6, 6)


def monodromy_multiplier(M: np.ndarray) -> float:
    evals = np.linalg.eigvals(M)
    return float(np.real(evals[np.argmax(np.abs(evals))]))


def rescale_to_length(surface, geodesic: ClosedGeodesic, target=_TWO_PI,
                      section_cfg: SectionConfig = None,
                      opts: IntegratorOptions = None):
    """Scale the ambient space so the closed geodesic has length `target`.

    Geodesics scale exactly with the surface, so one Newton re-solve on the
    scaled surface converges immediately.  Returns (surface, geodesic, scale).
    """
    c = target / geodesic.length
    scaled = surface.scaled(c)
    guess = geodesic.fixed_point_u.copy()
    guess[0] *= c
    geo2 = find_closed_geodesic(scaled, guess=guess, section_cfg=section_cfg,
                                opts=opts)
    return scaled, geo2, c


def unstable_manifold_seed(geodesic: ClosedGeodesic, offset: float):
    """Section state displaced by `offset` along the unstable direction,
    renormalized to unit speed."""
    u = geodesic.fixed_point_u + offset * geodesic.unstable_dir
    z, v = geodesic.section.embed(u)
    return z, v / np.linalg.norm(v)


def stable_manifold_seed(geodesic: ClosedGeodesic, offset: float):
    u = geodesic.fixed_point_u + offset * geodesic.stable_dir
    z, v = geodesic.section.embed(u)
    return z, v / np.linalg.norm(v)


# -- homoclinic search ------------------------------------------------------------


@dataclass
class HomoclinicSearchConfig:
    offset_scale: float = 1e-6      # base seed offset along the unstable direction
    n_coarse: int = 60              # seeds per branch of the fundamental domain
    max_crossings: int = 26
    leave_radius: float = 0.2
    detect_radius: float = 0.08
    angle_floor: float = 1e-3
    refine_tol: float = 1e-11
    tail_periods: int = 12          # crossings per asymptotic fit window
    fit_skip: int = 3               # crossings dropped next to the excursion
    branches: tuple = (1, -1)
    candidate_index: int = 0
    table_ds: float = 0.01
    clearance_factor: float = 0.45  # required far-orbit clearance, units of delta0
    refine_stages: tuple = (0, 4, 8)   # extra crossings per secant stage
    stage_tols: tuple = (1e-5, 1e-8, 1e-11)
    glue_skip: int = 5              # crossings past the return where sides glue
    bracket: tuple = None           # optional (h_lo, h_hi, n_return) to skip the sweep


@dataclass
class HomoclinicOrbit:
    """Transverse homoclinic orbit with asymptotic phases and channel data.

    The arclength origin s = 0 sits at the excursion point farthest from the
    closed geodesic (the natural Fermi-chart center); a_minus/a_plus are the
    asymptotic phase offsets against the inner shadow orbits and
    Delta = a_plus - a_minus.
    """

    geodesic: ClosedGeodesic
    s_table: np.ndarray = field(repr=False, default=None)
    zv_table: np.ndarray = field(repr=False, default=None)
    a_minus: float = 0.0
    a_plus: float = 0.0
    Delta: float = 0.0
    transversality_angle: float = 0.0
    decay_rate: float = 0.0
    delta0_max: float = 0.0
    fit_residual_minus: float = 0.0
    fit_residual_plus: float = 0.0
    crossings_j: np.ndarray = field(repr=False, default=None)
    crossings_s: np.ndarray = field(repr=False, default=None)
    crossings_zv: np.ndarray = field(repr=False, default=None)
    diagnostics: dict = field(default_factory=dict)
    _spline: object = field(repr=False, default=None)

    @property
    def seed_state(self):
        z, v = self.state(0.0)
        return np.concatenate([z, v])

    def finalize(self):
        self._spline = CubicSpline(self.s_table, self.zv_table)
        return self

    def state(self, s):
        """Unit-speed (z, v) at arclength s (s = 0 at the chart origin)."""
        y = self._spline(s)
        return y[0:3], y[3:6]

    def state_at_speed(self, s, J):
        z, v = self.state(s)
        return z, J * np.asarray(v)

    @property
    def s_min(self):
        return float(self.s_table[0])

    @property
    def s_max(self):
        return float(self.s_table[-1])


def _tail_fit(times, index, ratio):
    """Least squares t_j = A + B j + C r^|j - j0| over crossing times.

    index[0] must be the crossing nearest the excursion (largest deviation);
    returns (A, B, C, relative_residual).  The shadow inner orbit crosses the
    section when its phase passes multiples of the geodesic length, so the
    asymptotic phase is -J * A under the caller's j-indexing.
    """
    t = np.asarray(times, dtype=float)
    j = np.asarray(index, dtype=float)
    r = ratio ** np.abs(j - j[0])
    X = np.column_stack([np.ones_like(j), j, r])
    coef, *_ = np.linalg.lstsq(X, t, rcond=None)
    resid = t - X @ coef
    # relative residual against the exponential term, floored at a time scale
    # well below the model's resolution so machine-clean tails (where the
    # exponential amplitude is buried in integrator noise) do not report failure
    scale = max(float(np.max(np.abs(coef[2] * r))), 1e-6)
    rel = float(np.sqrt(np.mean(resid**2)) / scale)
    return float(coef[0]), float(coef[1]), float(coef[2]), rel


def _run_crossings(surface, section, y0, T, opts, count_to=None, detector=None,
                   keep_dense=False):
    """Integrate collecting all v_k>0 section crossings; optional terminal rules."""
    events = [section.crossing_event(name="section")]
    if count_to is not None:
        events.append(section.crossing_event(count_to=count_to, name="stop"))
    if detector is not None:
        events.append(section.crossing_event(extra_accept=detector, name="detect"))
    res = drive(static_rhs(surface), 0.0, np.asarray(y0, float), T, opts,
                events=events, keep_dense=keep_dense)
    hits = sorted(res.event_hits["section"], key=lambda h: h[0])
    return hits, res


class _ReturnDetector:
    """Stateful crossing filter: fires once the orbit has left a neighborhood
    of the fixed point and re-entered the detection radius on the right branch."""

    def __init__(self, section, u_star, leave_radius, detect_radius):
        self.section = section
        self.u_star = u_star
        self.leave_radius = leave_radius
        self.detect_radius = detect_radius
        self.left = False
        self.count = 0
        self.hit = None

    def __call__(self, t, y):
        self.count += 1
        if not self.section.in_chart_branch(y):
            self.left = True
            return False
        d = np.linalg.norm(self.section.coords(y) - self.u_star)
        if d > self.leave_radius:
            self.left = True
            return False
        if self.left and d <= self.detect_radius:
            self.hit = (self.count, t, y.copy())
            return True
        return False


def find_homoclinic(surface, geodesic: ClosedGeodesic,
                    search_cfg: HomoclinicSearchConfig = None,
                    opts: IntegratorOptions = None) -> HomoclinicOrbit:
    """Locate a transverse homoclinic orbit by an unstable-branch shooting sweep.

    Seeds along the local unstable manifold are flowed forward until they
    re-enter a neighborhood of the fixed point; sign changes of the unstable
    component of the return are refined by a secant iteration at fixed
    crossing count.  Raises NoHomoclinicFound or TangencySuspected.
    """
    cfg = search_cfg or HomoclinicSearchConfig()
    opts = opts or IntegratorOptions()
    sec = geodesic.section
    u_star = geodesic.fixed_point_u
    lam = geodesic.floquet_multiplier
    Binv = np.linalg.inv(np.column_stack([geodesic.unstable_dir,
                                          geodesic.stable_dir]))
    t_budget = (cfg.max_crossings + 6) * geodesic.period * 1.05

    def detect(h):
        """First qualified return of the seed at offset h: (n, t, y, A) or None."""
        z, v = unstable_manifold_seed(geodesic, h)
        det = _ReturnDetector(sec, u_star, cfg.leave_radius, cfg.detect_radius)
        _run_crossings(surface, sec, np.concatenate([z, v]), t_budget, opts,
                       detector=det)
        if det.hit is None:
            return None
        n, t, y = det.hit
        A = Binv @ (sec.coords(y) - u_star)
        return n, t, y, A

    def a_u_at(h, n_target):
        z, v = unstable_manifold_seed(geodesic, h)
        hits, _ = _run_crossings(surface, sec, np.concatenate([z, v]),
                                 t_budget, opts, count_to=n_target)
        if len(hits) < n_target:
            return None
        A = Binv @ (sec.coords(hits[n_target - 1][1]) - u_star)
        return float(A[0])

    candidates = []
    sweep_aus = []
    if cfg.bracket is not None:
        h_lo, h_hi, n_b = cfg.bracket
        f_lo, f_hi = a_u_at(h_lo, n_b), a_u_at(h_hi, n_b)
        if f_lo is None or f_hi is None or f_lo * f_hi >= 0:
            raise NoHomoclinicFound("supplied bracket does not straddle a zero")
        candidates.append({"h_lo": h_lo, "h_hi": h_hi, "A_lo": f_lo,
                           "A_hi": f_hi, "n": int(n_b)})
    else:
        for branch in cfg.branches:
            hs = branch * cfg.offset_scale * lam ** np.linspace(
                0.0, 1.0, cfg.n_coarse, endpoint=False)
            prev = None
            for h in hs:
                first = detect(h)
                if first is not None:
                    sweep_aus.append(abs(first[3][0]))
                if (first is not None and prev is not None and prev[1] is not None
                        and prev[1][0] == first[0]
                        and prev[1][3][0] * first[3][0] < 0):
                    candidates.append({"h_lo": prev[0], "h_hi": h,
                                       "A_lo": prev[1][3][0],
                                       "A_hi": first[3][0], "n": first[0]})
                prev = (h, first)

    if not candidates:
        if sweep_aus and max(sweep_aus) < 1e-6:
            raise TangencySuspected(
                "unstable sweep lands on the stable trace everywhere "
                "(separatrices do not split)")
        raise NoHomoclinicFound(
            "no sign change of the unstable return component over the sweep")

    candidates.sort(key=lambda c: (c["n"], abs(c["h_lo"])))
    cand = candidates[min(cfg.candidate_index, len(candidates) - 1)]
    n_ret = cand["n"]

    # staged secant refinement: later stages evaluate the unstable component
    # several crossings deeper, where contraction suppresses the curvature
    # error of the linear eigenframe decomposition
    h0, h1 = cand["h_lo"], cand["h_hi"]
    f0, f1 = cand["A_lo"], cand["A_hi"]
    h_star, f_star = h1, f1
    for extra, stage_tol in zip(cfg.refine_stages, cfg.stage_tols):
        n_eval = n_ret + extra
        if extra > 0:
            f0 = a_u_at(h0, n_eval)
            f1 = a_u_at(h1, n_eval)
            if f0 is None or f1 is None:
                raise NoHomoclinicFound("refinement stage lost the orbit")
        for _ in range(40):
            if f1 == f0:
                break
            h2 = h1 - f1 * (h1 - h0) / (f1 - f0)
            f2 = a_u_at(h2, n_eval)
            if f2 is None:
                h2 = 0.5 * (h0 + h1)
                f2 = a_u_at(h2, n_eval)
                if f2 is None:
                    raise NoHomoclinicFound("refinement lost the returning branch")
            h0, f0, h1, f1 = h1, f1, h2, f2
            h_star, f_star = h2, f2
            if abs(f2) < stage_tol:
                break

    # transversality angle at the detected homoclinic section point
    def nth_coords(h):
        z, v = unstable_manifold_seed(geodesic, h)
        hits, _ = _run_crossings(surface, sec, np.concatenate([z, v]),
                                 t_budget, opts, count_to=n_ret)
        if len(hits) < n_ret:
            raise NoHomoclinicFound("tangent probe lost the orbit")
        return sec.coords(hits[n_ret - 1][1])

    x_star = nth_coords(h_star)
    dh = 1e-3 * abs(h_star)
    T_u = (nth_coords(h_star + dh) - nth_coords(h_star - dh)) / (2 * dh)
    match_angle = _match_stable(surface, geodesic, x_star, opts, tangent=True)
    T_s = match_angle["tangent"]
    cross = abs(T_u[0] * T_s[1] - T_u[1] * T_s[0])
    angle = float(np.arcsin(min(1.0, cross / (np.linalg.norm(T_u)
                                              * np.linalg.norm(T_s)))))

    # glue the stable side several crossings past the return, where the
    # refined orbit is contracted onto the stable manifold
    n_glue = n_ret + cfg.glue_skip
    z, v = unstable_manifold_seed(geodesic, h_star)
    hits_g, _ = _run_crossings(surface, sec, np.concatenate([z, v]), t_budget,
                               opts, count_to=n_glue)
    if len(hits_g) < n_glue:
        raise NoHomoclinicFound("orbit lost before the gluing crossing")
    x_glue = sec.coords(hits_g[-1][1])
    match = _match_stable(surface, geodesic, x_glue, opts)

    orbit = _assemble_orbit(surface, geodesic, h_star, n_ret, n_glue, match,
                            cfg, opts)
    orbit.transversality_angle = angle
    orbit.diagnostics.update({"h_star": h_star, "residual_Au": abs(f_star),
                              "n_return": n_ret, "n_candidates": len(candidates),
                              "glue_gap": match["err"], "sigma": match["sigma"],
                              "k_glue": match["k"]})
    if angle < cfg.angle_floor:
        raise TangencySuspected(
            f"transversality angle {angle:.3e} below floor {cfg.angle_floor:.1e}")
    return orbit


def _match_stable(surface, geodesic, x_target, opts, tangent=False,
                  sigma_ref=3e-5):
    """Match a local stable seed's k-th backward crossing to a section point.

    Returns sigma (seed offset), k (backward crossing count), the residual
    gap, and optionally the stable-trace tangent there.  Backward iterates
    amplify integration noise by the multiplier per crossing, so k is chosen
    to keep the seed offset near sigma_ref.
    """
    sec = geodesic.section
    u_star = geodesic.fixed_point_u
    lam = geodesic.floquet_multiplier
    d_target = np.linalg.norm(x_target - u_star)

    def backward_coords(sigma, k):
        z, v = stable_manifold_seed(geodesic, sigma)
        hits, _ = _run_crossings(surface, sec, np.concatenate([z, v]),
                                 -(k + 2.5) * geodesic.period, opts)
        hits.sort(key=lambda h: -h[0])
        if len(hits) < k:
            return None
        return sec.coords(hits[k - 1][1])

    k_est = max(2, int(round(np.log(max(d_target, 1e-8) / sigma_ref)
                             / np.log(lam))))
    best = None
    for sgn in (1.0, -1.0):
        for k in (k_est, k_est + 1, k_est - 1):
            if k < 1:
                continue
            sig = sgn * d_target / lam**k
            uu = backward_coords(sig, k)
            if uu is None:
                continue
            for _ in range(30):
                d = np.linalg.norm(uu - u_star)
                if d == 0:
                    break
                sig *= d_target / d
                uu2 = backward_coords(sig, k)
                if uu2 is None:
                    break
                uu = uu2
                if abs(np.linalg.norm(uu - u_star) - d_target) < 1e-12:
                    break
            if uu is None:
                continue
            err = np.linalg.norm(uu - x_target)
            if best is None or err < best["err"]:
                best = {"err": err, "sigma": sig, "k": k, "coords": uu}
            if best is not None and best["err"] < 0.05 * d_target:
                break
        if best is not None and best["err"] < 0.05 * d_target:
            break
    if best is None or best["err"] > 0.5 * d_target:
        raise NoHomoclinicFound("stable trace matching failed near the "
                                "candidate homoclinic point")

    # slide along the trace to null the tangential mismatch
    sig, k = best["sigma"], best["k"]
    dsig = 1e-3 * abs(sig)
    up = backward_coords(sig + dsig, k)
    um = backward_coords(sig - dsig, k)
    if up is None or um is None:
        raise NoHomoclinicFound("stable trace tangent probe failed")
    T_s = (up - um) / (2 * dsig)
    that = T_s / np.linalg.norm(T_s)
    uu = best["coords"]
    for _ in range(20):
        miss = uu - x_target
        step = -float(np.dot(miss, that)) / np.linalg.norm(T_s)
        if abs(step) < 1e-15:
            break
        sig += step
        uu2 = backward_coords(sig, k)
        if uu2 is None:
            break
        uu = uu2
        if abs(np.dot(uu - x_target, that)) < 1e-13:
            break
    gap = float(np.linalg.norm(uu - x_target))
    out = {"sigma": sig, "k": k, "err": gap, "coords": uu}
    if tangent:
        out["tangent"] = T_s
    return out


class _DenseUnion:
    """Time-sorted union of dense-output segments with binary-search lookup."""

    def __init__(self):
        self._segs = []

    def add(self, segments, shift=0.0):
        for seg in segments:
            lo, hi = min(seg.ta, seg.tb) + shift, max(seg.ta, seg.tb) + shift
            self._segs.append((lo, hi, shift, seg.sol))

    def freeze(self):
        self._segs.sort(key=lambda s: s[0])
        self._lo = np.array([s[0] for s in self._segs])
        self._hi = np.array([s[1] for s in self._segs])
        return self

    @property
    def t_min(self):
        return float(self._lo[0])

    @property
    def t_max(self):
        return float(self._hi[-1])

    def __call__(self, t):
        i = int(np.searchsorted(self._lo, t + 1e-12) - 1)
        for j in (i, i + 1, i - 1):
            if 0 <= j < len(self._segs):
                lo, hi, shift, sol = self._segs[j]
                if lo - 1e-10 <= t <= hi + 1e-10:
                    return np.asarray(sol(t - shift))
        raise ValueError(f"time {t} outside stored dense segments")


def _assemble_orbit(surface, geodesic, h_star, n_ret, n_glue, match, cfg, opts):
    """Two-sided orbit assembly with tail fits.

    The unstable side is the refined shooting seed integrated backward (exact
    tail) and forward up to the gluing crossing; the forward continuation is
    the matched local stable seed integrated backward to the gluing crossing
    and forward along its own exact tail.  The two sides agree at the gluing
    crossing up to the trace-matching gap.
    """
    sec = geodesic.section
    L = geodesic.period
    lam = geodesic.floquet_multiplier
    z, v = unstable_manifold_seed(geodesic, h_star)
    y0 = np.concatenate([z, v])
    n_tail = cfg.tail_periods

    # unstable side
    hits_f, res_f = _run_crossings(surface, sec, y0, (n_glue + 4) * L * 1.2, opts,
                                   count_to=n_glue, keep_dense=True)
    hits_b, res_b = _run_crossings(surface, sec, y0, -(n_tail + 4) * L * 1.2, opts,
                                   count_to=n_tail + 2, keep_dense=True)
    if len(hits_f) < n_glue:
        raise NoHomoclinicFound("assembly lost the returning orbit")
    t_glue = hits_f[-1][0]

    # stable side: seed q at offset sigma, k backward crossings reach the glue
    sigma, k_glue = match["sigma"], match["k"]
    zq, vq = stable_manifold_seed(geodesic, sigma)
    yq = np.concatenate([zq, vq])
    hits_sb, res_sb = _run_crossings(surface, sec, yq, -(k_glue + 2.5) * L, opts,
                                     count_to=k_glue, keep_dense=True)
    if len(hits_sb) < k_glue:
        raise NoHomoclinicFound("stable-side backward run lost crossings")
    hits_sb.sort(key=lambda h: h[0])
    tau = -hits_sb[0][0]              # time from glue crossing to q
    t_q = t_glue + tau
    hits_sf, res_sf = _run_crossings(surface, sec, yq, (n_tail + 4) * L * 1.2,
                                     opts, count_to=n_tail + 2, keep_dense=True)

    dense = _DenseUnion()
    dense.add(res_b.segments)
    dense.add(res_f.segments)
    dense.add(res_sb.segments, shift=t_q)
    dense.add(res_sf.segments, shift=t_q)
    dense.freeze()

    # consecutive crossing index j: first forward crossing of the seed is j=1
    hits_b.sort(key=lambda h: h[0])
    cross_t = [t for (t, _) in hits_b] + [t for (t, _) in hits_f]
    cross_y = [y for (_, y) in hits_b] + [y for (_, y) in hits_f]
    j_u = list(range(1 - len(hits_b), n_glue + 1))
    # stable side: intermediate backward crossings are j = n_glue+1 .. and q
    # itself is the crossing j = n_glue + k_glue
    for (t, y) in hits_sb[1:]:
        cross_t.append(t + t_q)
        cross_y.append(y)
    cross_t.append(t_q)
    cross_y.append(yq)
    j_s = list(range(n_glue + 1, n_glue + k_glue + 1))
    for idx, (t, y) in enumerate(sorted(hits_sf, key=lambda h: h[0]), start=1):
        cross_t.append(t + t_q)
        cross_y.append(y)
        j_s.append(n_glue + k_glue + idx)
    t_all = np.array(cross_t)
    y_all = np.array(cross_y)
    j_all = np.array(j_u + j_s)
    order = np.argsort(t_all)
    t_all, y_all, j_all = t_all[order], y_all[order], j_all[order]

    # backward tail fit (unstable side, exact): anchor nearest the seed
    mb = j_all <= 0
    A_m, B_m, C_m, rel_m = _tail_fit(t_all[mb][::-1], j_all[mb][::-1], 1.0 / lam)

    # forward tail fit (stable side, exact)
    mf = j_all >= n_glue + 1
    A_p, B_p, C_p, rel_p = _tail_fit(t_all[mf], j_all[mf], 1.0 / lam)

    a_minus, a_plus = -A_m, -A_p

    # decay rate per arclength from the unstable tail's growth toward the
    # excursion (same exponent as the backward contraction, but the usable
    # distances span several decades above the noise floor)
    mg = (j_all >= 1) & (j_all <= n_glue)
    dg = np.array([np.linalg.norm(sec.coords(y) - geodesic.fixed_point_u)
                   for y in y_all[mg]])
    jg = j_all[mg]
    good = (dg > 1e-10) & (dg < 0.5 * cfg.leave_radius)
    good &= jg <= jg[np.argmax(dg > 0.5 * cfg.leave_radius)] if np.any(
        dg > 0.5 * cfg.leave_radius) else True
    slope, logC = np.polyfit(jg[good], np.log(dg[good]), 1)
    decay_rate = float(slope) / L
    decay_rel = float(np.sqrt(np.mean(
        (np.log(dg[good]) - (slope * jg[good] + logC)) ** 2)))

    s_grid = np.arange(dense.t_min + 1e-9, dense.t_max - 1e-9, cfg.table_ds)
    table = np.empty((len(s_grid), 6))
    for i, t in enumerate(s_grid):
        table[i] = dense(t)[0:6]

    dist_gamma = geodesic.distances_to_curve(table[:, 0:3])
    s_c, delta0_max = _choose_center(s_grid, table[:, 0:3], dist_gamma, cfg)

    orbit = HomoclinicOrbit(
        geodesic=geodesic,
        s_table=s_grid - s_c, zv_table=table,
        a_minus=float(a_minus + s_c), a_plus=float(a_plus + s_c),
        Delta=float(a_plus - a_minus),
        decay_rate=decay_rate, delta0_max=delta0_max,
        fit_residual_minus=rel_m, fit_residual_plus=rel_p,
        crossings_j=j_all, crossings_s=t_all - s_c, crossings_zv=y_all,
        diagnostics={"B_minus": B_m, "B_plus": B_p, "C_minus": C_m, "C_plus": C_p,
                     "decay_fit_residual": decay_rel, "s_center": s_c,
                     "t_glue": t_glue, "t_q": t_q},
    ).finalize()
    return orbit


def _choose_center(s, pts, dist_gamma, cfg, gamma_floor=0.5, buffer=0.3):
    """Chart center on the excursion maximizing the admissible half-width.

    For each candidate center the admissible delta0 is the largest value
    whose +-delta0 segment keeps all orbit points farther along the orbit
    than `buffer` at distance > clearance_factor * delta0, and stays at
    least as far from the closed geodesic.
    """
    from scipy.spatial import cKDTree
    tree = cKDTree(pts)
    cand = np.where(dist_gamma > gamma_floor)[0]
    if len(cand) == 0:
        cand = np.array([int(np.argmax(dist_gamma))])
    cand = cand[::max(1, len(cand) // 400)]
    d0_values = np.linspace(min(np.pi / 8, 0.45), 0.05, 33)
    best = (0.0, float(s[int(np.argmax(dist_gamma))]))
    for ic in cand:
        sc = s[ic]
        for d0 in d0_values:
            if d0 <= best[0]:
                break
            seg_mask = np.abs(s - sc) <= d0
            clearance = cfg.clearance_factor * d0
            if dist_gamma[seg_mask].min() <= max(clearance, gamma_floor * 0.6):
                continue
            groups = tree.query_ball_point(pts[seg_mask], r=clearance)
            ok = True
            for nbrs in groups:
                nb = np.asarray(nbrs, dtype=int)
                if np.any(np.abs(s[nb] - sc) > d0 + buffer):
                    ok = False
                    break
            if ok:
                best = (float(d0), float(sc))
                break
    return best[1], best[0]


# -- asymptotic phase as a standalone operation -----------------------------------


def asymptotic_phase(surface, geodesic: ClosedGeodesic, state, direction: int,
                     n_periods: int = 12, opts: IntegratorOptions = None,
                     fit_skip: int = 1, residual_tol: float = 0.1) -> float:
    """Asymptotic phase offset of a state on W^s (direction=+1) or W^u (-1).

    Fits crossing times of the forward (backward) orbit against the inner
    shadow; the phase offset is defined up to multiples of the geodesic
    length.  Raises FitFailed when the exponential fit is poor.
    """
    from .errors import FitFailed
    opts = opts or IntegratorOptions()
    sec = geodesic.section
    z, v = state
    y0 = np.concatenate([np.asarray(z, float), np.asarray(v, float)])
    J = float(np.linalg.norm(v))
    d0 = geodesic.distance(y0[0:3], y0[3:6] / J)
    T = direction * (n_periods + fit_skip + 3) * geodesic.period / J * 1.1
    hits, _ = _run_crossings(surface, sec, y0, T, opts,
                             count_to=n_periods + fit_skip + 1)
    hits.sort(key=lambda h: abs(h[0]))
    if len(hits) < n_periods:
        raise FitFailed("not enough section crossings for the phase fit")
    hits = hits[fit_skip:fit_skip + n_periods]
    t = np.array([h[0] for h in hits])
    j = np.arange(1, len(t) + 1) * (1 if direction > 0 else -1)
    A, B, C, rel = _tail_fit(t, j, 1.0 / geodesic.floquet_multiplier)
    if d0 > 1e-10 and rel > residual_tol:
        raise FitFailed(f"phase fit residual {rel:.2e} above {residual_tol}")
    return float(-J * A)
