"""Numerical certificates for the DN operator identities and mapping bounds.

Two verdict types are produced.  ``exact`` reports compare two independent
evaluations of an algebraic identity and must sit at solver precision.
``bounded`` reports track an operator norm over a refinement ladder and pass
when successive values stabilise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .dn import assemble_stiffness, dn_map, harmonic_extension
from .errors import DomainError
from .geometry.mesh import build_disk
from .geometry.metric import MetricField
from .sobolev import operator_norm
from .split import SIGMA1, SplitOperators

EXACT_TOL = 1e-9
STABLE_RATIO = 1.2


@dataclass
class IdentityReport:
    """Outcome of one identity or boundedness check."""

    identity: str
    abs: float
    rel: float
    resolution: int
    passed: bool
    kind: str = "exact"
    details: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"identity": self.identity, "abs": self.abs, "rel": self.rel,
                           "resolution": self.resolution, "pass": bool(self.passed)})

    def as_dict(self):
        return asdict(self)


def _exact_report(name, abs_res, scale, resolution, tol=EXACT_TOL, **details):
    rel = float(abs_res) / max(float(scale), 1e-30)
    return IdentityReport(name, float(abs_res), rel, int(resolution), bool(rel <= tol), "exact", details)


def _columns(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _resolution(mesh):
    return len(mesh.loops["outer"])


# ------------------------------------------------------------- exact identities
def difference_formula_residual(mesh, g, h, u, v, tol=EXACT_TOL):
    """DN difference against the exterior energy term plus the core DN difference.

    Left side: ``u^T (S^1 - S^2) v`` from the two full DN maps on ``outer``.
    Right side: ``E^1(u)^T (K^1_ext - K^2_ext) E^2(v) + u'^T (S^1_Sigma1 -
    S^2_Sigma1) v'`` where primes denote traces on ``sigma1``.  Columns of
    ``u`` and ``v`` are independent trials; the worst one is reported.
    """
    if SIGMA1 not in mesh.interfaces:
        raise DomainError("difference formula needs a mesh with a core interface 'sigma1'")
    if g.n_triangles != mesh.n_triangles or h.n_triangles != mesh.n_triangles:
        raise DomainError("metric and mesh region tags do not match")
    o1, o2 = SplitOperators(mesh, g), SplitOperators(mesh, h)
    U, V = _columns(u), _columns(v)
    lhs = np.einsum("ik,ij,jk->k", U, o1.Lambda.form_matrix - o2.Lambda.form_matrix, V)
    scale_l = np.abs(np.einsum("ik,ij,jk->k", U, o1.Lambda.form_matrix, V)) + \
        np.abs(np.einsum("ik,ij,jk->k", U, o2.Lambda.form_matrix, V))
    E1 = o1.full.extension_matrix(("outer",), ("outer",), np.arange(mesh.n_nodes)) @ U
    E2 = o2.full.extension_matrix(("outer",), ("outer",), np.arange(mesh.n_nodes)) @ V
    dK = o1.ext.K - o2.ext.K
    s = mesh.loop(SIGMA1)
    dS = o1.LambdaSigma.form_matrix - o2.LambdaSigma.form_matrix
    rhs = np.einsum("ik,ik->k", E1, dK @ E2) + np.einsum("ik,ij,jk->k", E1[s], dS, E2[s])
    scale_r = np.abs(np.einsum("ik,ij,jk->k", E1[s], o1.LambdaSigma.form_matrix, E2[s])) + \
        np.abs(np.einsum("ik,ij,jk->k", E1[s], o2.LambdaSigma.form_matrix, E2[s]))
    res = np.abs(lhs - rhs)
    rel = res / np.maximum(np.maximum(scale_l, scale_r), 1e-30)
    k = int(np.argmax(rel))
    return _exact_report("difference_formula", res[k], max(scale_l[k], scale_r[k]), _resolution(mesh), tol,
                         trials=U.shape[1], lhs=float(lhs[k]), rhs=float(rhs[k]))


def transmission_residual(mesh, g, u, tol=EXACT_TOL):
    """``(S^{0,1} + S_{Sigma_1}) u' = -(K_ext E^{1,0}(u))|_{sigma1}`` with ``u' = E(u)|_{sigma1}``.

    The conormal on the right is taken outward from ``M \\ Sigma_1``; the sign
    absorbs the flip to the normal of ``Sigma_1``.
    """
    ops = SplitOperators(mesh, g)
    U = _columns(u)
    uprime = ops.restriction @ U
    lhs = ops.transmission_matrix() @ uprime
    # independent path: solve the exterior problem with zero data on sigma1
    W = np.zeros((mesh.n_nodes, U.shape[1]))
    for k in range(U.shape[1]):
        W[:, k] = harmonic_extension(ops.ext, {"outer": U[:, k]}, ("outer", SIGMA1)).values
    s = mesh.loop(SIGMA1)
    rhs = -(ops.ext.K[s] @ W)
    res = np.abs(lhs - rhs).max(axis=0)
    scale = np.maximum(np.abs(lhs).max(axis=0), np.abs(rhs).max(axis=0))
    scale = np.maximum(scale, np.abs(ops.Lambda01.form_matrix).max() * np.abs(uprime).max(axis=0))
    rel = res / np.maximum(scale, 1e-30)
    k = int(np.argmax(rel))
    return _exact_report("transmission", res[k], scale[k], _resolution(mesh), tol, trials=U.shape[1])


def comparison_map_residual(mesh, g, h, v, tol=EXACT_TOL):
    """``E^2(v)|_{sigma1} = (S^{0,1} + S^h_{Sigma_1})^{-1} (S^{0,1} + S^g_{Sigma_1}) E^1(v)|_{sigma1}``.

    ``h`` is the composite metric; it must coincide with ``g`` outside the core.
    """
    o1, o2 = SplitOperators(mesh, g), SplitOperators(mesh, h)
    if np.abs(o1.ext.K - o2.ext.K).max() > 0:
        raise DomainError("metrics must agree on M \\ Sigma_1")
    V = _columns(v)
    direct = o2.restriction @ V
    P1 = o1.transmission_matrix()
    P2 = o1.Lambda01.form_matrix + o2.LambdaSigma.form_matrix
    formula = sla.solve(P2, P1 @ (o1.restriction @ V), assume_a="pos")
    res = np.abs(direct - formula).max(axis=0)
    scale = np.maximum(np.abs(direct).max(axis=0), np.abs(formula).max(axis=0))
    rel = res / np.maximum(scale, 1e-30)
    k = int(np.argmax(rel))
    return _exact_report("comparison_map", res[k], scale[k], _resolution(mesh), tol, trials=V.shape[1])


def adjoint_matrices(ops):
    """Mass adjoint of the restriction ``T`` and the conormal formula for it.

    ``T* = M_b^{-1} T^T M_s`` and ``-M_b^{-1} C^T P^{-1} M_s`` where ``C^T z``
    is the conormal on ``outer`` of ``E^{0,1}(z)``.
    """
    mb, ms = ops.calc_outer.mass, ops.calc_sigma.mass
    T = ops.restriction
    adj = (T.T * ms[None, :]) / mb[:, None]
    P = ops.transmission_matrix()
    formula = -(ops.coupling.T @ sla.solve(P, np.diag(ms), assume_a="pos")) / mb[:, None]
    return adj, formula


def adjoint_formula_residual(mesh, g, tol=EXACT_TOL, pairs=100, seed=0):
    """Operator-norm residual of the adjoint formula plus a brute-force pairing check."""
    ops = SplitOperators(mesh, g)
    adj, formula = adjoint_matrices(ops)
    cs, cb = ops.calc_sigma, ops.calc_outer
    res = operator_norm(adj - formula, 0, 0, cs, cb)
    scale = operator_norm(adj, 0, 0, cs, cb)
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((cb.n, pairs))
    Wf = rng.standard_normal((cs.n, pairs))
    left = np.einsum("ik,i,ik->k", ops.restriction @ F, cs.mass, Wf)
    right = np.einsum("ik,i,ik->k", F, cb.mass, formula @ Wf)
    pair_rel = float(np.max(np.abs(left - right) / np.maximum(np.abs(left) + np.abs(right), 1e-30)))
    rep = _exact_report("adjoint_formula", res, scale, _resolution(mesh), tol, pairing_rel=pair_rel)
    rep.passed = rep.passed and pair_rel <= max(tol, 1e-10)
    return rep


# ------------------------------------------------------------ boundedness checks
def _ladder(base_resolution, levels=3):
    return [base_resolution * 2 ** k for k in range(levels)]


def _stable(values, ratio=STABLE_RATIO, two_sided=True):
    """Successive ratios at most ``ratio`` (and at least ``1/ratio`` if two-sided)."""
    v = np.asarray(values, dtype=float)
    if np.all(v == 0):
        return True
    r = v[1:] / np.maximum(v[:-1], 1e-300)
    ok = r <= ratio
    if two_sided:
        ok &= r >= 1 / ratio
    return bool(np.all(ok))


def _bounded_report(name, values, resolutions, two_sided=True, **details):
    v = [float(x) for x in values]
    rel = float(np.max(np.abs(np.diff(v))) / max(max(v), 1e-30)) if len(v) > 1 else 0.0
    return IdentityReport(name, v[-1], rel, int(resolutions[-1]), _stable(v, two_sided=two_sided), "bounded",
                          dict(values=v, resolutions=list(resolutions), **details))


def _disk_factory(mesh_factory):
    return mesh_factory if mesh_factory is not None else (lambda n: build_disk(1.0, n))


def _metric_for(metric_factory, mesh):
    return metric_factory(mesh) if metric_factory is not None else MetricField.euclidean(mesh.n_triangles)


def symbol_remainder_norm(mesh, metric, s, band=16, loop="outer"):
    """``||Lambda - Delta_0^{1/2}||_{H^s -> H^s}`` on the ``band`` lowest boundary modes."""
    sys_ = assemble_stiffness(mesh, metric)
    Lam = dn_map(sys_, (loop,))
    calc = Lam.calculus
    R = Lam.matrix - calc.power_matrix(0.5, homogeneous=True)
    return operator_norm(R, s, s, calc, band=band)


def symbol_remainder_check(s=0.5, resolution=64, mesh_factory=None, metric_factory=None, band=16, levels=3):
    """Principal-symbol remainder ``R = Lambda - Delta_0^{1/2}`` over a refinement ladder.

    The norm is restricted to a fixed band of low boundary modes: above the
    mesh frequency the discrete DN map and ``Delta_0^{1/2}`` drift apart at a
    rate set by the discretisation, not by the remainder.
    """
    if not -1 <= s <= 1:
        raise DomainError("symbol remainder check needs s in [-1, 1]")
    factory = _disk_factory(mesh_factory)
    res = _ladder(resolution, levels)
    vals = []
    for n in res:
        mesh = factory(n)
        vals.append(symbol_remainder_norm(mesh, _metric_for(metric_factory, mesh), s, band))
    # a remainder that shrinks under refinement is bounded; only growth fails
    return _bounded_report("symbol_remainder", vals, res, two_sided=False, s=s, band=band)


def central_derivative(calc):
    """Periodic centred arclength derivative on a loop."""
    n = calc.n
    ell = calc.lengths
    D = np.zeros((n, n))
    i = np.arange(n)
    h = ell + np.roll(ell, 1)
    D[i, (i + 1) % n] = 1.0 / h
    D[i, (i - 1) % n] = -1.0 / h
    return D


def commutator_norms_at(mesh, metric, eta, X, s, band=16, loop="outer"):
    """``(||[Lambda, eta]||_{s -> s}, ||[X, Lambda]||_{s -> s-1})`` on one mesh.

    ``eta`` and ``X`` are callables of the loop nodes' polar angle (or arrays);
    ``X`` gives the coefficient of the arclength derivative.
    """
    sys_ = assemble_stiffness(mesh, metric)
    Lam = dn_map(sys_, (loop,))
    calc = Lam.calculus
    p = mesh.nodes[Lam.nodes]
    th = np.arctan2(p[:, 1], p[:, 0])
    e = eta(th) if callable(eta) else np.broadcast_to(np.asarray(eta, dtype=float), th.shape)
    x = X(th) if callable(X) else np.broadcast_to(np.asarray(X, dtype=float), th.shape)
    A = Lam.matrix
    c1 = A * e[None, :] - e[:, None] * A
    Xm = x[:, None] * central_derivative(calc)
    c2 = Xm @ A - A @ Xm
    s2 = max(s - 1, -2.0)
    return operator_norm(c1, s, s, calc, band=band), operator_norm(c2, s, s2, calc, band=band)


def commutator_norms(eta, X, s=0.5, resolution=64, mesh_factory=None, metric_factory=None, band=16, levels=3):
    """Commutator norms over a refinement ladder with a stabilisation verdict."""
    factory = _disk_factory(mesh_factory)
    res = _ladder(resolution, levels)
    n1, n2 = [], []
    for n in res:
        mesh = factory(n)
        a, b = commutator_norms_at(mesh, _metric_for(metric_factory, mesh), eta, X, s, band)
        n1.append(a)
        n2.append(b)
    r1 = _bounded_report("commutator_eta", n1, res, s=s)
    r2 = _bounded_report("commutator_X", n2, res, s=s)
    passed = r1.passed and r2.passed
    return IdentityReport("commutators", max(n1[-1], n2[-1]), max(r1.rel, r2.rel), res[-1], passed, "bounded",
                          dict(eta=r1.details["values"], X=n2, resolutions=res, s=s))


def gap_and_constant(mesh, metric, loop="outer"):
    """Second-smallest DN eigenvalue, kernel dimension and the fitted constant ``C``.

    ``C`` is the smallest constant with ``||f||_{1/2}^2 <= C^2 (||f||_{-1/2}^2 +
    ||Lambda f||_{-1/2}^2)``, which implies the unsquared estimate.
    """
    sys_ = assemble_stiffness(mesh, metric)
    Lam = dn_map(sys_, (loop,))
    calc = Lam.calculus
    ev = sla.eigh(Lam.form_matrix, np.diag(Lam.mass), eigvals_only=True)
    scale = ev[-1]
    kernel = int(np.sum(ev < 1e-9 * scale))
    E, lam = calc.eigenvectors, calc.eigenvalues
    A = E.T @ (calc.mass[:, None] * Lam.matrix) @ E
    W = np.diag((1 + lam) ** -0.5)
    denom = W + A.T @ W @ A
    num = np.diag((1 + lam) ** 0.5)
    top = sla.eigh(num, denom, eigvals_only=True)[-1]
    return float(ev[1]), kernel, float(np.sqrt(top))


def spectral_gap_check(resolution=64, mesh_factory=None, metric_factory=None, levels=3, gap_threshold=1e-3):
    """Kernel of the DN map is the constants; the elliptic constant stabilises under refinement."""
    factory = _disk_factory(mesh_factory)
    res = _ladder(resolution, levels)
    gaps, kernels, consts = [], [], []
    for n in res:
        mesh = factory(n)
        gap, ker, C = gap_and_constant(mesh, _metric_for(metric_factory, mesh))
        gaps.append(gap)
        kernels.append(ker)
        consts.append(C)
    rep = _bounded_report("spectral_gap", consts, res, gaps=gaps, kernel=kernels)
    rep.passed = rep.passed and all(k == 1 for k in kernels) and min(gaps) > gap_threshold
    return rep


def run_suite(mesh, g, h, trials=50, seed=0, tol=EXACT_TOL):
    """The four exact identities on one mesh with ``trials`` random inputs each."""
    rng = np.random.default_rng(seed)
    nb = len(mesh.loops["outer"])
    U = rng.standard_normal((nb, trials))
    V = rng.standard_normal((nb, trials))
    return [
        difference_formula_residual(mesh, g, h, U, V, tol),
        transmission_residual(mesh, g, U, tol),
        comparison_map_residual(mesh, g, h, V, tol),
        adjoint_formula_residual(mesh, g, tol, seed=seed),
    ]


__all__ = [
    "IdentityReport", "adjoint_formula_residual", "adjoint_matrices", "commutator_norms", "commutator_norms_at",
    "comparison_map_residual", "difference_formula_residual", "gap_and_constant", "run_suite",
    "spectral_gap_check", "symbol_remainder_check", "symbol_remainder_norm", "transmission_residual",
]
