"""Implicit surfaces M = {Q = 0} in R^3 with analytic derivatives.

Ambient points are plain length-3 numpy arrays.  The built-in surface family
is a triaxial ellipsoid plus optional localized Gaussian bumps; all
derivatives (gradient, Hessian, and the Hessian's directional derivative
needed by variational equations) are analytic.  Finite-difference tests
validate them against Q itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGradient, NoConvergence, NotTangent, ValidationError

#: |Q| band inside which a point counts as on-surface.
CONSTRAINT_BAND = 1e-6

#: target residual for Newton projection onto the surface.
PROJECTION_TOL = 1e-12


@dataclass(frozen=True)
class GaussianBump:
    """Localized bump mu * exp(-|z - center|^2 / width^2) added to Q."""

    center: tuple
    mu: float
    width: float


@dataclass(frozen=True)
class BumpedEllipsoid:
    """Q(z) = sum z_i^2/axes_i^2 - 1 + sum of Gaussian bumps.

    axes == (r, r, r) with no bumps gives the sphere of radius r.
    """

    axes: tuple
    bumps: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.axes) != 3 or min(self.axes) <= 0:
            raise ValidationError("ellipsoid axes must be 3 positive reals")

    @property
    def params(self) -> dict:
        return {
            "kind": "bumped_ellipsoid",
            "axes": list(self.axes),
            "bumps": [
                {"center": list(b.center), "mu": b.mu, "width": b.width}
                for b in self.bumps
            ],
        }

    def Q(self, z):
        z = np.asarray(z, dtype=float)
        a = np.asarray(self.axes)
        q = np.sum((z / a) ** 2) - 1.0
        for b in self.bumps:
            d = z - np.asarray(b.center)
            q += b.mu * np.exp(-np.dot(d, d) / b.width**2)
        return q

    def grad_Q(self, z):
        z = np.asarray(z, dtype=float)
        a = np.asarray(self.axes)
        g = 2.0 * z / a**2
        for b in self.bumps:
            d = z - np.asarray(b.center)
            w2 = b.width**2
            g += b.mu * np.exp(-np.dot(d, d) / w2) * (-2.0 * d / w2)
        return g

    def hess_Q(self, z):
        z = np.asarray(z, dtype=float)
        a = np.asarray(self.axes)
        h = np.diag(2.0 / a**2)
        for b in self.bumps:
            d = z - np.asarray(b.center)
            w2 = b.width**2
            e = b.mu * np.exp(-np.dot(d, d) / w2)
            h = h + e * (4.0 * np.outer(d, d) / w2**2 - 2.0 * np.eye(3) / w2)
        return h

    def hess_directional(self, z, v):
        """Vector t with t_k = v^T (d hess_Q/d z_k) v (third derivatives of Q).

        The ellipsoid part has constant Hessian, so only bumps contribute.
        """
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        t = np.zeros(3)
        for b in self.bumps:
            d = z - np.asarray(b.center)
            w2 = b.width**2
            e = b.mu * np.exp(-np.dot(d, d) / w2)
            dv = np.dot(d, v)
            vav = 4.0 * dv**2 / w2**2 - 2.0 * np.dot(v, v) / w2
            t += e * ((-2.0 * d / w2) * vav + 8.0 * v * dv / w2**2)
        return t

    def scaled(self, c: float) -> "BumpedEllipsoid":
        """Surface {z : Q(z/c) = 0}: same family with all lengths scaled by c."""
        return BumpedEllipsoid(
            axes=tuple(c * a for a in self.axes),
            bumps=tuple(
                GaussianBump(
                    center=tuple(c * x for x in b.center),
                    mu=b.mu,
                    width=c * b.width,
                )
                for b in self.bumps
            ),
        )


def sphere(radius: float = 1.0) -> BumpedEllipsoid:
    return BumpedEllipsoid(axes=(radius, radius, radius))


def make_surface(cfg: dict) -> BumpedEllipsoid:
    """Build a surface from its run-config description (kind tag + params)."""
    kind = cfg.get("kind", "bumped_ellipsoid")
    if kind not in ("bumped_ellipsoid", "ellipsoid", "sphere"):
        raise ValidationError(f"unknown surface kind {kind!r}")
    if kind == "sphere":
        return sphere(float(cfg.get("radius", 1.0)))
    axes = tuple(float(a) for a in cfg["axes"])
    bumps = tuple(
        GaussianBump(
            center=tuple(float(x) for x in b["center"]),
            mu=float(b["mu"]),
            width=float(b["width"]),
        )
        for b in cfg.get("bumps", [])
    )
    return BumpedEllipsoid(axes=axes, bumps=bumps)


# -- operations ---------------------------------------------------------------


def project_to_surface(surface, z, tol: float = PROJECTION_TOL, max_iter: int = 50):
    """Project z onto {Q = 0} by Newton along the line through grad_Q(z).

    Returns z' with |Q(z')| <= tol and z' - z parallel to grad_Q(z).
    """
    z = np.asarray(z, dtype=float)
    g0 = surface.grad_Q(z)
    n0 = np.linalg.norm(g0)
    if n0 < 1e-12:
        raise DegenerateGradient("grad_Q vanishes at the projection base point")
    d = g0 / n0
    s = 0.0
    for _ in range(max_iter):
        zk = z + s * d
        q = surface.Q(zk)
        if abs(q) <= tol:
            return zk
        slope = np.dot(surface.grad_Q(zk), d)
        if abs(slope) < 1e-14:
            raise NoConvergence("projection Newton hit a flat direction")
        s -= q / slope
    raise NoConvergence(f"projection did not reach |Q| <= {tol} in {max_iter} iterations")


def unit_normal(surface, z):
    """Inward-pointing unit normal n = -grad_Q / |grad_Q|."""
    g = surface.grad_Q(z)
    ng = np.linalg.norm(g)
    if ng < 1e-12:
        raise DegenerateGradient("grad_Q vanishes; no normal direction")
    return -g / ng


def tangent_project(surface, z, w):
    """Remove the normal component of w at the on-surface point z."""
    n = unit_normal(surface, z)
    w = np.asarray(w, dtype=float)
    return w - np.dot(w, n) * n


def normal_curvature(surface, z, v, check_tangent: bool = True):
    """Quadratic form v^T hess_Q(z) v (no gradient normalization).

    This is the raw second-derivative form; conversions to the classical
    normal curvature divide by powers of |grad_Q| and are applied where the
    consumer needs them (see perturbation.kappa_effective).
    """
    v = np.asarray(v, dtype=float)
    if check_tangent:
        nv = np.linalg.norm(v)
        if nv > 0:
            g = surface.grad_Q(z)
            if abs(np.dot(g, v)) > 1e-10 * max(1.0, np.linalg.norm(g)) * nv:
                raise NotTangent("v is not tangent to the surface at z")
    return float(v @ surface.hess_Q(z) @ v)


def on_surface(surface, z, band: float = CONSTRAINT_BAND) -> bool:
    return abs(surface.Q(z)) <= band
