"""Oscillating boundary probes and the contrast-to-DN-difference stability curve.

A probe is the trace ``psi(|x - x0|) cos(xi . (x - x0))`` of the harmonic
function ``cos(xi . x) exp(-|xi| tau)`` cut off near a boundary point.  Its
DN quadratic form, normalised by the boundary ``L^2`` mass, measures the
boundary symbol ``|xi|`` in the metric at ``x0``; comparing two metrics gives
pointwise inclusion contrast.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dn import assemble_stiffness, dn_map, harmonic_extension
from .errors import (ConformalPerturbationError, DomainError, FitError, GeometryError, SolverError)
from .geometry.metric import MetricField, anisotropic_perturbation
from .runge import FitConstants, RungeOperators, runge_iterate, adjoint_lower_bound_experiment
from .sobolev import BoundaryCalculus, hs_norm, lipschitz_approximation, operator_norm

CONFORMAL_TOL = 1e-10


def smooth_cutoff(rho, r0):
    """Quintic bump: 1 on ``[0, r0/4]``, 0 on ``[3 r0/4, inf)``, monotone in between."""
    z = np.clip((np.asarray(rho, dtype=float) - 0.25 * r0) / (0.5 * r0), 0.0, 1.0)
    return 1.0 - z ** 3 * (10 - 15 * z + 6 * z * z)


@dataclass(frozen=True)
class ProbeSpec:
    """Probe centre ``x0`` on a boundary loop, covector ``xi`` and support radius ``r0``.

    ``threshold`` bounds ``sqrt(|xi| r0)`` from below (large-frequency regime).
    """

    center: tuple
    xi: tuple
    r0: float
    loop: str = "sigma1"
    threshold: float = 2.0

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (2,):
            raise DomainError("xi must be a 2-vector")
        if not np.any(xi):
            raise DomainError("xi = 0 is not a probe frequency (the |xi|^{-1/2} normalisation is undefined)")
        if self.r0 <= 0:
            raise DomainError("r0 must be positive")
        if math.sqrt(float(np.linalg.norm(xi)) * self.r0) <= self.threshold:
            raise DomainError(f"sqrt(|xi| r0) = {math.sqrt(np.linalg.norm(xi) * self.r0):.3g} does not exceed "
                              f"the threshold {self.threshold}")

    @property
    def frequency(self):
        return float(np.linalg.norm(self.xi))

    def cutoff(self, rho):
        return smooth_cutoff(rho, self.r0)


def probe_spec_at_angle(radius, angle, k, r0, loop="sigma1", threshold=2.0):
    """Probe on a circle of ``radius`` at ``angle`` with tangential frequency ``k``."""
    x0 = (radius * math.cos(angle), radius * math.sin(angle))
    t = (-math.sin(angle), math.cos(angle))
    return ProbeSpec(x0, (k * t[0], k * t[1]), r0, loop, threshold)


def _system_for(mesh, metric, loop, cache=None):
    if cache is not None:
        key = ("sys", id(metric), loop)
        if key not in cache:
            cache[key] = _system_for(mesh, metric, loop)
        return cache[key]
    full = assemble_stiffness(mesh, metric)
    if loop == "sigma1":
        return full.subsystem("core")
    return full


def _check_patch(nodes_xy, x0, r0):
    d = np.linalg.norm(nodes_xy - np.asarray(x0)[None, :], axis=1)
    inside = d < r0
    n = len(d)
    if inside.sum() > n // 2:
        raise GeometryError("probe support covers more than half of the loop; shrink r0")
    # one contiguous arc in the cyclic order
    starts = np.count_nonzero(inside & ~np.roll(inside, 1))
    if starts > 1:
        raise GeometryError("probe support B(x0, r0) meets the loop in more than one arc")
    if d.min() > 0.5 * r0:
        raise GeometryError("probe centre is not on the loop")
    return d


def oscillating_probe(spec, mesh, metric=None, calc=None):
    """Nodal probe ``(u1, v1)`` on ``spec.loop`` with ``||u1||_{1/2} = 1``.

    ``v1`` equals ``u1``: the quadratic-form reading of the pairing.

    Raises
    ------
    GeometryError
        If ``B(x0, r0)`` is not a single arc of the loop.
    """
    nodes = mesh.loop(spec.loop)
    xy = mesh.nodes[nodes]
    d = _check_patch(xy, spec.center, spec.r0)
    phase = (xy - np.asarray(spec.center)[None, :]) @ np.asarray(spec.xi, dtype=float)
    u = spec.cutoff(d) * np.cos(phase)
    if calc is None:
        calc = BoundaryCalculus.from_loop(mesh, metric, nodes)
    nu = hs_norm(u, 0.5, calc)
    if nu == 0:
        raise GeometryError("probe vanishes on the mesh (support smaller than the mesh spacing)")
    u = u / nu
    return u, u.copy()


def energy_concentration(spec, mesh, metric=None, radius=None):
    """Fraction of the Dirichlet energy of the probe's harmonic extension in ``B(x0, radius)``.

    The Dirichlet energy of the extension equals the DN form, the ``H^{1/2}``
    seminorm of the trace.
    """
    radius = 0.5 * spec.r0 if radius is None else radius
    metric = metric if metric is not None else MetricField.euclidean(mesh.n_triangles)
    u, _ = oscillating_probe(spec, mesh, metric)
    sys_ = _system_for(mesh, metric, spec.loop)
    U = harmonic_extension(sys_, {spec.loop: u}).values
    t = mesh.triangles[sys_.triangle_mask]
    Ke = sys_.element_matrices
    Ut = U[t]
    e = np.einsum("ti,tij,tj->t", Ut, Ke, Ut)
    cen = mesh.nodes[t].mean(axis=1)
    inside = np.linalg.norm(cen - np.asarray(spec.center)[None, :], axis=1) < radius
    return float(e[inside].sum() / e.sum())


@dataclass
class ProbeEstimate:
    ratio: float
    target: float
    deviation: float
    pairing: float
    energy_g: float
    energy_h: float


def _tangent_length(mesh, metric, spec):
    """``|t|_metric`` for the unit tangent of the loop at the probe centre."""
    nodes = mesh.loop(spec.loop)
    xy = mesh.nodes[nodes]
    i = int(np.argmin(np.linalg.norm(xy - np.asarray(spec.center)[None, :], axis=1)))
    t = xy[(i + 1) % len(xy)] - xy[i - 1]
    t = t / np.linalg.norm(t)
    a, b = nodes[i], nodes[(i + 1) % len(nodes)]
    tri = np.flatnonzero((mesh.triangles == a).any(axis=1) & (mesh.triangles == b).any(axis=1))
    G = metric.tensors[tri[0]]
    return float(math.sqrt(t @ G @ t))


def _calc_for(mesh, metric, loop, cache=None):
    if cache is None:
        return BoundaryCalculus.from_loop(mesh, metric, mesh.loop(loop))
    key = ("calc", id(metric), loop)
    if key not in cache:
        cache[key] = BoundaryCalculus.from_loop(mesh, metric, mesh.loop(loop))
    return cache[key]


def contrast_lower_bound_estimate(g, h, spec, mesh, cache=None):
    """Quadratic-form ratio of ``h`` against ``g`` for the probe ``spec``.

    ``ratio = [Lambda_h(u)(u) / ||u||^2_{L^2(ds_h)}] / [Lambda_g(u)(u) / ||u||^2_{L^2(ds_g)}]``
    is compared with ``|xi|_h / |xi|_g`` for the tangential covector
    (``|t|_g / |t|_h`` with ``t`` the boundary tangent).  ``pairing`` is
    ``(Lambda_g - Lambda_h)(u1)(v1)`` with ``u1 = v1`` normalised in ``H^{1/2}(g)``.
    ``cache`` (a dict) keeps factorizations across calls on the same mesh and metrics.
    """
    cg = _calc_for(mesh, g, spec.loop, cache)
    ch = _calc_for(mesh, h, spec.loop, cache)
    u, v = oscillating_probe(spec, mesh, g, cg)
    energies = []
    for m in (g, h):
        sys_ = _system_for(mesh, m, spec.loop, cache)
        U = harmonic_extension(sys_, {spec.loop: u}).values
        energies.append(float(U @ (sys_.K @ U)))
    eg, eh = energies
    ratio = (eh / float(u @ (ch.mass * u))) / (eg / float(u @ (cg.mass * u)))
    target = _tangent_length(mesh, g, spec) / _tangent_length(mesh, h, spec)
    return ProbeEstimate(ratio, target, abs(ratio - target) / target, eg - eh, eg, eh)


def probe_frequency_ladder(g, h, mesh, radius, angle, r0, ks, loop="sigma1"):
    """``contrast_lower_bound_estimate`` over a list of tangential frequencies."""
    cache = {}
    return [contrast_lower_bound_estimate(g, h, probe_spec_at_angle(radius, angle, k, r0, loop), mesh, cache)
            for k in ks]


def probe_localization(mesh, g, h_inclusion, angles, k, r0, radius):
    """Pairings ``(Lambda_g - Lambda_{g + chi(h-g)})`` on ``sigma1`` as the probe moves away from ``Sigma``.

    Returns ``(distances, pairings)`` where ``distances`` are from the probe
    centre to the inclusion boundary nodes.
    """
    from .geometry.metric import composite_metric

    comp = composite_metric(g, h_inclusion, mesh)
    sig = mesh.nodes[mesh.interfaces["sigma"]]
    dist, pair = [], []
    cache = {}
    for a in angles:
        spec = probe_spec_at_angle(radius, a, k, r0)
        est = contrast_lower_bound_estimate(g, comp, spec, mesh, cache)
        dist.append(float(np.min(np.linalg.norm(sig - np.asarray(spec.center)[None, :], axis=1))))
        pair.append(abs(est.pairing))
    return np.array(dist), np.array(pair)


# ---------------------------------------------------------------- stability curve
@dataclass
class StabilityCurve:
    """Measured contrasts and DN-difference norms on one mesh."""

    contrasts: np.ndarray
    norms: np.ndarray
    resolution: int
    pairings: np.ndarray | None = None
    epsilons: np.ndarray | None = None
    constants: FitConstants | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.contrasts = np.asarray(self.contrasts, dtype=float)
        self.norms = np.asarray(self.norms, dtype=float)
        order = np.argsort(self.contrasts, kind="stable")
        self.contrasts, self.norms = self.contrasts[order], self.norms[order]
        if self.pairings is not None:
            self.pairings = np.asarray(self.pairings, dtype=float)[order]
        if self.epsilons is not None:
            self.epsilons = np.asarray(self.epsilons, dtype=float)[order]
        if np.any(np.diff(self.contrasts) == 0):
            raise DomainError("contrasts must be distinct")
        if np.any(self.norms < 0):
            raise DomainError("norms must be nonnegative")

    def write_csv(self, path):
        pairs = self.pairings if self.pairings is not None else np.full(len(self.contrasts), np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["contrast", "opnorm", "resolution", "pairing"])
            for c, n, p in zip(self.contrasts, self.norms, pairs):
                w.writerow([repr(float(c)), repr(float(n)), self.resolution, repr(float(p))])


def is_conformal_direction(g, delta, triangles, tol=1e-12):
    """True iff ``g^{-1} delta`` is a multiple of the identity on every listed triangle."""
    G = g.tensors[triangles]
    D = np.broadcast_to(np.asarray(delta, dtype=float), (g.n_triangles, 2, 2))[triangles]
    P = np.linalg.solve(G, D)
    tr = 0.5 * (P[:, 0, 0] + P[:, 1, 1])
    off = P - tr[:, None, None] * np.eye(2)
    return bool(np.all(np.abs(off) <= tol * np.maximum(1.0, np.abs(P).max())))


def dn_difference_norm(mesh, g, h, band=None):
    """``||Lambda_g - Lambda_h||_{H^{1/2} -> H^{-1/2}}`` on ``outer``, constants projected out."""
    Lg = dn_map(assemble_stiffness(mesh, g), ("outer",))
    Lh = dn_map(assemble_stiffness(mesh, h), ("outer",))
    calc = Lg.calculus
    return operator_norm(Lg.matrix - Lh.matrix, 0.5, -0.5, calc, project_constants=True, band=band), Lg, Lh


def _pipeline_pairing(mesh, g, Lg, Lh, ops, constants, eps, k, r0, max_iter):
    """Probe on ``sigma1`` facing the inclusion, Lipschitz truncation, Runge transport, pairing on ``outer``."""
    sig = mesh.nodes[mesh.interfaces["sigma"]].mean(axis=0)
    s1 = mesh.nodes[mesh.interfaces["sigma1"]]
    radius = float(np.mean(np.linalg.norm(s1, axis=1)))
    angle = math.atan2(sig[1], sig[0]) if np.linalg.norm(sig) > 1e-12 else 0.0
    spec = probe_spec_at_angle(radius, angle, k, r0)
    u, _ = oscillating_probe(spec, mesh, g, ops.cs)
    approx = lipschitz_approximation(u, eps, ops.cs)
    target = approx.values if approx.modes else u
    trace = runge_iterate(target, eps, constants, ops, max_iter=max_iter)
    u0 = trace.u
    return abs(float(u0 @ ((Lg.form_matrix - Lh.form_matrix) @ u0))), trace


def stability_sweep(mesh, g, delta, contrasts, pipeline=False, c_double_prime=10.0, band=None,
                    probe_k=12.0, probe_r0=None, runge_max_iter=300):
    """DN-difference norms along ``h_c = g + c * delta`` on the inclusion.

    Parameters
    ----------
    delta : (2, 2) array or (nt, 2, 2) array
        Perturbation direction; must be non-conformal on the inclusion.
    pipeline : bool
        Also run probe -> Lipschitz truncation (``eps = contrast / c_double_prime``)
        -> Runge transport and record the pairing on ``outer``.

    Raises
    ------
    ConformalPerturbationError
        If ``delta`` is conformal to ``g`` on the inclusion; carries the
        measured norm (verified at most ``1e-10``).
    """
    from .geometry.mesh import INCLUSION

    incl = np.flatnonzero(mesh.regions == INCLUSION)
    if len(incl) == 0:
        raise DomainError("mesh has no inclusion")
    contrasts = [float(c) for c in contrasts]
    if is_conformal_direction(g, delta, incl):
        c = max(abs(x) for x in contrasts) or 1.0
        h = anisotropic_perturbation(mesh, g, delta, c)
        norm = dn_difference_norm(mesh, g, h, band)[0]
        if norm > CONFORMAL_TOL:
            raise SolverError(f"conformal perturbation gave DN difference {norm:.3e} > {CONFORMAL_TOL}; "
                              "assembly is not conformally invariant")
        raise ConformalPerturbationError(
            f"delta is conformal to g on the inclusion; in 2D the DN map is conformally invariant, "
            f"measured ||Lambda_g - Lambda_h|| = {norm:.2e}", norm)
    measured, norms, pairs, epss = [], [], [], []
    ops = constants = None
    if pipeline:
        ops = RungeOperators(mesh, g)
        constants = adjoint_lower_bound_experiment(ops)
        s1 = mesh.nodes[mesh.interfaces["sigma1"]]
        probe_r0 = probe_r0 or 0.6 * float(np.mean(np.linalg.norm(s1, axis=1)))
    for c in contrasts:
        if c == 0:
            measured.append(0.0)
            norms.append(0.0)
            pairs.append(0.0)
            epss.append(0.0)
            continue
        h = anisotropic_perturbation(mesh, g, delta, c)
        n, Lg, Lh = dn_difference_norm(mesh, g, h, band)
        measured.append(h.contrast)
        norms.append(n)
        if pipeline:
            eps = h.contrast / c_double_prime
            p, _ = _pipeline_pairing(mesh, g, Lg, Lh, ops, constants, eps, probe_k, probe_r0, runge_max_iter)
            pairs.append(p)
            epss.append(eps)
    res = int(len(mesh.loop("outer")))
    curve = StabilityCurve(np.array(measured), np.array(norms), res,
                           np.array(pairs) if pipeline else None, np.array(epss) if pipeline else None,
                           details={"nominal": contrasts})
    return curve


def fit_pipeline_constants(curve):
    """``C`` (least-squares slope of pairing on contrast) and the smallest ``C' >= 0``
    with ``pairing >= C c - C' eps`` at every point."""
    c, p, e = curve.contrasts, curve.pairings, curve.epsilons
    if p is None:
        raise FitError("curve has no pipeline pairings")
    m = c > 0
    C = float(np.dot(c[m], p[m]) / np.dot(c[m], c[m]))
    Cp = float(max(0.0, np.max((C * c[m] - p[m]) / e[m])))
    return C, Cp


def log_stability_fit(curve):
    """Fit ``contrast = C1 |log norm|^{-1/C2}`` in log-log coordinates.

    Least squares on ``log contrast = log C1 - (1/C2) log|log norm|`` gives
    ``C2`` and ``C1_ls``; ``C1`` is then the smallest value for which the
    inequality ``contrast <= C1 |log norm|^{-1/C2}`` holds at every point.

    Raises
    ------
    FitError
        Fewer than four usable points, a zero norm at positive contrast, or a
        non-negative slope.
    """
    c = np.asarray(curve.contrasts, dtype=float)
    n = np.asarray(curve.norms, dtype=float)
    pos = c > 0
    if np.any(n[pos] <= 0):
        raise FitError("zero DN difference at positive contrast: degenerate curve")
    use = pos & (np.abs(np.log(np.where(n > 0, n, 1.0))) > 0)
    if use.sum() < 4:
        raise FitError("need at least four points with positive contrast and norm != 1")
    x = np.log(np.abs(np.log(n[use])))
    y = np.log(c[use])
    fit = stats.linregress(x, y)
    if fit.slope >= 0:
        raise FitError(f"contrast increases with |log norm| (slope {fit.slope:.3g}); no log-type fit")
    C2 = float(-1.0 / fit.slope)
    C1_ls = math.exp(fit.intercept)
    C1 = float(np.max(c[use] * np.abs(np.log(n[use])) ** (1.0 / C2)))
    pred = C1 * np.abs(np.log(n[use])) ** (-1.0 / C2)
    holds = bool(np.all(c[use] <= pred * (1 + 1e-12)))
    resid = float(np.sqrt(np.mean((y - (fit.intercept + fit.slope * x)) ** 2)))
    return FitConstants(C1=C1, C2=C2, provenance={
        "experiment": "log_stability_fit", "C1_ls": C1_ls, "rms_log_residual": resid,
        "inequality_holds": holds, "points": int(use.sum())})


def synthetic_curve(C1, C2, contrasts, resolution=0):
    """Norms generated exactly from ``contrast = C1 |log norm|^{-1/C2}`` (norm < 1)."""
    c = np.asarray(contrasts, dtype=float)
    norms = np.exp(-(C1 / c) ** C2)
    return StabilityCurve(c, norms, resolution)


def fit_json(constants):
    return json.dumps({"C1": constants.C1, "C2": constants.C2, "C3": constants.C3,
                       "residual": constants.provenance.get("rms_log_residual"),
                       "inequality_holds": constants.provenance.get("inequality_holds")})
