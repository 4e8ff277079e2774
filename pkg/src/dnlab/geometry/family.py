"""Nested shrinking families obtained by radially morphing a fixed mesh.

A profile describes the moving outer boundary in polar form
``rho(theta, t)``; the boundary correspondence is ``phi_t(theta) =
rho(theta, t) (cos theta, sin theta)``.  All derived fields (normal speed,
tangential drift, divergence, log-derivative of the length element) come
from analytic derivatives of the profile.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..errors import ConfigurationError, GeometryError, TransversalityError
from .mesh import TriMesh


@dataclass(frozen=True)
class ProfileValues:
    """``rho`` and its partial derivatives at a set of angles and one time."""

    r: np.ndarray
    r_t: np.ndarray
    r_th: np.ndarray
    r_thth: np.ndarray
    r_tht: np.ndarray


def _smoothstep5(z):
    z = np.clip(z, 0.0, 1.0)
    return z ** 3 * (10 - 15 * z + 6 * z * z)


def _smoothstep5_d(z):
    inside = (z > 0) & (z < 1)
    return np.where(inside, 30 * z * z * (1 - z) ** 2, 0.0)


def _smoothstep5_dd(z):
    inside = (z > 0) & (z < 1)
    return np.where(inside, 60 * z * (1 - z) * (1 - 2 * z), 0.0)


class Profile:
    """Base class: subclasses implement :meth:`values`."""

    radius = 1.0

    def values(self, theta, t):
        raise NotImplementedError


@dataclass(frozen=True)
class IdentityProfile(Profile):
    """The static family; its normal speed vanishes identically."""

    radius: float = 1.0

    def values(self, theta, t):
        z = np.zeros_like(np.asarray(theta, dtype=float))
        return ProfileValues(z + self.radius, z, z, z, z)


@dataclass(frozen=True)
class UniformShrink(Profile):
    """``rho = R (1 - rate t)``; for rate 1/2 this is ``r -> (1 - t/2) r``."""

    rate: float = 0.5
    radius: float = 1.0

    def values(self, theta, t):
        z = np.zeros_like(np.asarray(theta, dtype=float))
        return ProfileValues(z + self.radius * (1 - self.rate * t), z - self.radius * self.rate, z, z, z)


@dataclass(frozen=True)
class ExponentialShrink(Profile):
    """``rho = R exp(-kappa t)``: constant normal speed ratio, nonlinear in ``t``."""

    kappa: float = 0.5
    radius: float = 1.0

    def values(self, theta, t):
        z = np.zeros_like(np.asarray(theta, dtype=float))
        r = self.radius * np.exp(-self.kappa * t)
        return ProfileValues(z + r, z - self.kappa * r, z, z, z)


@dataclass(frozen=True)
class WavyShrink(Profile):
    """``rho = R (1 - t (a + b cos(m theta)))``; has tangential drift."""

    a: float = 0.3
    b: float = 0.1
    m: int = 2
    radius: float = 1.0

    def values(self, theta, t):
        th = np.asarray(theta, dtype=float)
        c, s = np.cos(self.m * th), np.sin(self.m * th)
        R, m = self.radius, self.m
        return ProfileValues(
            R * (1 - t * (self.a + self.b * c)),
            -R * (self.a + self.b * c),
            R * t * self.b * m * s,
            R * t * self.b * m * m * c,
            R * self.b * m * s,
        )


@dataclass(frozen=True)
class TentacleProfile(Profile):
    """Uniform collar plus a smooth finger reaching a point of an inner circle.

    At ``t = 1`` the boundary follows ``R (1 - base)`` away from the target
    direction and, inside an angular window around it, the far arc of the
    circle ``|y - center| = target_radius``.

    Parameters
    ----------
    center, target_radius : inclusion circle to reach
    target_angle : float
        Polar angle (about the origin) of the reached boundary point.
    half_width : float
        Angular half-width of the plateau where the finger follows the arc.
    ramp : float
        Angular width of the smooth transition on each side.
    base : float
        Relative depth of the uniform collar at ``t = 1``.
    """

    center: tuple = (0.0, 0.0)
    target_radius: float = 0.3
    target_angle: float = np.pi / 2
    half_width: float = 0.4
    ramp: float = 0.4
    base: float = 0.2
    radius: float = 1.0

    def _bump(self, theta):
        d = np.angle(np.exp(1j * (np.asarray(theta, dtype=float) - self.target_angle)))
        ad = np.abs(d)
        z = (self.half_width + self.ramp - ad) / self.ramp
        dz = -np.sign(d) / self.ramp
        return _smoothstep5(z), _smoothstep5_d(z) * dz, _smoothstep5_dd(z) * dz * dz

    def arc(self, theta):
        """Far intersection of the ray at angle ``theta`` with the inclusion circle."""
        th = np.asarray(theta, dtype=float)
        c = np.asarray(self.center, dtype=float)
        u = np.stack([np.cos(th), np.sin(th)], axis=-1)
        up = np.stack([-np.sin(th), np.cos(th)], axis=-1)
        p = u @ c
        p_th = up @ c
        disc = p * p - c @ c + self.target_radius ** 2
        if np.any(disc <= 0):
            raise GeometryError("tentacle window sees rays that miss the target circle")
        q = np.sqrt(disc)
        r = p + q
        r_th = p_th + p * p_th / q
        p_thth = -p
        q_th = p * p_th / q
        r_thth = p_thth + (p_th * p_th + p * p_thth) / q - p * p_th * q_th / (q * q)
        return r, r_th, r_thth

    def values(self, theta, t):
        th = np.asarray(theta, dtype=float)
        R = self.radius
        beta, beta_th, beta_thth = self._bump(th)
        window = beta > 0
        a = np.full_like(th, R * (1 - self.base))
        a_th = np.zeros_like(th)
        a_thth = np.zeros_like(th)
        if np.any(window):
            ra, ra_th, ra_thth = self.arc(th[window])
            a[window] = (1 - beta[window]) * R * (1 - self.base) + beta[window] * ra
            a_th[window] = beta_th[window] * (ra - R * (1 - self.base)) + beta[window] * ra_th
            a_thth[window] = (beta_thth[window] * (ra - R * (1 - self.base))
                              + 2 * beta_th[window] * ra_th + beta[window] * ra_thth)
        # rho = R - t (R - end), end = a(theta)
        return ProfileValues(R - t * (R - a), a - R, t * a_th, t * a_thth, a_th)

    @property
    def target_point(self):
        r, _, _ = self.arc(np.array([self.target_angle]))
        return r[0] * np.array([np.cos(self.target_angle), np.sin(self.target_angle)])


def boundary_fields(values):
    """Normal speed, drift coefficient, divergence and length log-derivative.

    With ``T = rho_th u + rho u_perp`` the boundary tangent and ``nu`` the
    outward normal, the velocity ``rho_t u`` splits as ``-eta nu + a T`` where
    ``eta = -rho_t rho / |T|`` and ``a = rho_t rho_th / |T|^2``; the drift is
    ``X = a d/dtheta``.  ``div X`` uses the length element ``|T| dtheta``.
    """
    r, r_t, r_th, r_thth, r_tht = values.r, values.r_t, values.r_th, values.r_thth, values.r_tht
    w2 = r_th ** 2 + r ** 2
    w = np.sqrt(w2)
    eta = -r_t * r / w
    a = r_t * r_th / w2
    wa_th = (r_tht * r_th + r_t * r_thth) / w - r_t * r_th * (r_th * r_thth + r * r_th) / (w * w2)
    div = wa_th / w
    gamma = (r_th * r_tht + r * r_t) / w2
    return dict(eta=eta, a=a, div=div, gamma=gamma, w=w)


@dataclass(frozen=True, eq=False)
class NestedFamily:
    """Morphed copies of a base mesh with the boundary fields of each level.

    ``meshes[k]`` realises ``Sigma_{t_k}``; the outer loop keeps its node
    indices, so ``loop`` is the correspondence ``phi_{t_k}`` on nodes.
    """

    base: TriMesh
    profile: Profile
    times: np.ndarray
    pivot: float = 0.0
    min_speed: float = 1e-8
    loop_name: str = "outer"

    @cached_property
    def loop(self):
        return self.base.loops[self.loop_name]

    @cached_property
    def theta(self):
        p = self.base.nodes[self.loop]
        return np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * np.pi)

    def morph(self, t):
        """Node coordinates of the base mesh morphed to time ``t``."""
        x = self.base.nodes
        r = np.linalg.norm(x, axis=1)
        th = np.arctan2(x[:, 1], x[:, 0])
        R = self.profile.radius
        rho = self.profile.values(th, t).r
        if np.any(rho <= self.pivot):
            raise GeometryError(f"profile radius falls to the pivot circle at t = {t}")
        moving = r > self.pivot
        s = np.where(moving, self.pivot + (r - self.pivot) * (rho - self.pivot) / (R - self.pivot), r)
        scale = np.divide(s, r, out=np.ones_like(r), where=r > 0)
        return x * scale[:, None]

    @cached_property
    def meshes(self):
        out = []
        for t in self.times:
            try:
                out.append(self.base.with_nodes(self.morph(t)))
            except GeometryError as exc:
                raise GeometryError(f"self-intersecting morph at t = {t:.6g}: {exc}") from exc
        return out

    def values(self, k_or_t):
        t = self._time(k_or_t)
        return self.profile.values(self.theta, t)

    def fields(self, k_or_t):
        return boundary_fields(self.values(k_or_t))

    def _time(self, k_or_t):
        if isinstance(k_or_t, (int, np.integer)):
            return float(self.times[k_or_t])
        return float(k_or_t)

    def eta(self, k_or_t):
        """Normal speed on the boundary nodes; raises if transversality fails."""
        eta = self.fields(k_or_t)["eta"]
        if not np.all(eta >= self.min_speed):
            raise TransversalityError(
                f"normal speed min {eta.min():.3e} is below the transversality bound {self.min_speed:g} "
                f"at t = {self._time(k_or_t):.6g}")
        return eta

    def check_transversal(self):
        return min(float(self.eta(k).min()) for k in range(len(self.times)))

    def __len__(self):
        return len(self.times)


def nested_family(mesh, levels, profile, t_end=1.0, pivot=None, min_speed=1e-8, check=True):
    """Family ``Sigma_{t_0} > ... > Sigma_{t_N}`` with ``t_k = k t_end / N``.

    Parameters
    ----------
    mesh : TriMesh
        Disk (pivot 0) or annulus (pivot = inner radius) type mesh whose outer
        loop is the circle of radius ``profile.radius``.
    levels : int
        Number of steps ``N``; the family has ``N + 1`` meshes.
    profile : Profile
    pivot : float, optional
        Nodes with ``|x| <= pivot`` stay fixed.  Defaults to 0 for disks and
        to the inner loop radius for annuli.
    check : bool
        Verify transversality and mesh validity on every level.
    """
    if levels < 1:
        raise ConfigurationError("a nested family needs at least one level")
    if pivot is None:
        pivot = 0.0
        if "inner" in mesh.loops:
            pivot = float(np.linalg.norm(mesh.nodes[mesh.loops["inner"]], axis=1).max())
    outer = mesh.nodes[mesh.loops["outer"]]
    if not np.allclose(np.linalg.norm(outer, axis=1), profile.radius, rtol=1e-9):
        raise GeometryError("outer loop is not the profile's circle")
    fam = NestedFamily(mesh, profile, np.linspace(0.0, t_end, levels + 1), float(pivot), min_speed)
    if check:
        fam.check_transversal()
        _ = fam.meshes
    return fam
