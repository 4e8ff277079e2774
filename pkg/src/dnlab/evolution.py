"""Semi-discrete layer stripping along a nested family.

Every level ``t`` of a :class:`~dnlab.geometry.NestedFamily` yields operators
on the fixed node set of ``outer``:

* ``A_t``: the DN map of ``Sigma_t`` pulled back through the node
  correspondence, as a function-to-function matrix;
* ``B_t = eta^{1/2} A_t eta^{1/2}`` and ``S_t = eta^{1/2} [A_t, eta^{1/2}]``,
  so that ``-B_t + S_t = -eta A_t``;
* ``X_t``: the tangential drift as a first-order derivative matrix in the
  level-0 angle.

The level inner product is the lumped boundary mass of ``Sigma_t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog
from scipy.spatial import cKDTree

from .dn import assemble_stiffness, dn_map, harmonic_extension
from .errors import ConfigurationError, FitError, GeometryError, StepSizeError
from .geometry.metric import MetricField
from .identities import IdentityReport
from .sobolev import BoundaryCalculus, hs_norm, operator_norm


# ------------------------------------------------------------------ operators
def drift_matrix(theta, a, scheme="upwind"):
    """Matrix of ``a(theta) d/dtheta`` on a periodic, increasing node sequence."""
    n = len(theta)
    dp = np.mod(np.roll(theta, -1) - theta, 2 * np.pi)
    dm = np.roll(dp, 1)
    D = np.zeros((n, n))
    i = np.arange(n)
    ip, im = (i + 1) % n, (i - 1) % n
    if scheme == "central":
        h = dp + dm
        D[i, ip] += a / h
        D[i, im] -= a / h
        return D
    fwd = a > 0
    D[i[fwd], ip[fwd]] += a[fwd] / dp[fwd]
    D[i[fwd], i[fwd]] -= a[fwd] / dp[fwd]
    bwd = ~fwd
    D[i[bwd], i[bwd]] += a[bwd] / dm[bwd]
    D[i[bwd], im[bwd]] -= a[bwd] / dm[bwd]
    return D


def weighted_boundary_stiffness(calc, weight):
    """Form of ``f -> int weight |df/ds|^2 ds`` with edge weights averaged from nodes."""
    n = calc.n
    we = 0.5 * (weight + np.roll(weight, -1)) / calc.lengths
    L = np.zeros((n, n))
    i = np.arange(n)
    j = (i + 1) % n
    np.add.at(L, (i, i), we)
    np.add.at(L, (j, j), we)
    np.add.at(L, (i, j), -we)
    np.add.at(L, (j, i), -we)
    return L


@dataclass(frozen=True, eq=False)
class EvolutionOperators:
    """Pulled-back operators of one level of a nested family."""

    t: float
    A: np.ndarray
    form: np.ndarray
    mass: np.ndarray
    eta: np.ndarray
    a: np.ndarray
    div: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    calculus: BoundaryCalculus
    scheme: str = "upwind"

    @property
    def sqrt_eta(self):
        return np.sqrt(self.eta)

    @property
    def B(self):
        r = self.sqrt_eta
        return r[:, None] * self.A * r[None, :]

    @property
    def S(self):
        r = self.sqrt_eta
        return r[:, None] * (self.A * r[None, :] - r[:, None] * self.A)

    @property
    def X(self):
        return drift_matrix(self.theta, self.a, self.scheme)

    def inner(self, f, g):
        return float(np.dot(f * self.mass, g))

    def derivative_formula(self, scheme="central"):
        """``A eta A - L_eta + [X, A] + (div X) A - gamma A`` as a function operator.

        ``L_eta`` is the eta-weighted Laplace-Beltrami operator of the level
        boundary.  This is the derivative of the pulled-back DN map obtained
        from the Hadamard variation of the Dirichlet energy.
        """
        A = self.A
        L = weighted_boundary_stiffness(self.calculus, self.eta) / self.mass[:, None]
        X = drift_matrix(self.theta, self.a, scheme)
        return A @ (self.eta[:, None] * A) - L + (X @ A - A @ X) + self.div[:, None] * A - self.gamma[:, None] * A


def _level_mesh(family, t):
    if isinstance(t, (int, np.integer)):
        return family.meshes[t], float(family.times[t])
    return family.base.with_nodes(family.morph(float(t))), float(t)


def pullback_dn(family, level, metric=None, scheme="upwind"):
    """Operators of level ``level`` (an index, or a time for off-grid levels)."""
    mesh, t = _level_mesh(family, level)
    if metric is None:
        metric = MetricField.euclidean(mesh.n_triangles)
    eta = family.eta(t)
    fields = family.fields(t)
    sys_ = assemble_stiffness(mesh, metric)
    Lam = dn_map(sys_, (family.loop_name,))
    if not np.array_equal(Lam.nodes, family.loop):
        raise GeometryError("level loop order differs from the base loop")
    return EvolutionOperators(t, Lam.matrix, Lam.form_matrix, Lam.mass, eta, fields["a"], fields["div"],
                              fields["gamma"], family.theta, Lam.calculus, scheme)


# ------------------------------------------------------- tautological residual
class PointLocator:
    """Barycentric interpolation of nodal P1 data at arbitrary points."""

    def __init__(self, mesh, k=12):
        self.mesh = mesh
        p = mesh.nodes[mesh.triangles]
        self._p0 = p[:, 0]
        B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self._Binv = np.linalg.inv(B)
        self._tree = cKDTree(p.mean(axis=1))
        self.k = min(k, mesh.n_triangles)

    def locate(self, points):
        points = np.atleast_2d(points)
        _, cand = self._tree.query(points, k=self.k)
        cand = np.atleast_2d(cand)
        tri = np.full(len(points), -1)
        bary = np.zeros((len(points), 3))
        for i, x in enumerate(points):
            best, best_val = -1, -np.inf
            for c in list(cand[i]) + [None]:
                if c is None:
                    # fall back to a full scan
                    lam = np.einsum("tij,tj->ti", self._Binv, x - self._p0)
                    full = np.column_stack([1 - lam.sum(axis=1), lam])
                    c = int(np.argmax(full.min(axis=1)))
                lam = self._Binv[c] @ (x - self._p0[c])
                b = np.array([1 - lam.sum(), lam[0], lam[1]])
                if b.min() > best_val:
                    best, best_val, best_b = c, b.min(), b
                if best_val >= -1e-12:
                    break
            if best_val < -1e-9:
                raise GeometryError(f"point {x} lies outside the mesh")
            tri[i], bary[i] = best, best_b
        return tri, bary

    def interpolate(self, values, points):
        tri, bary = self.locate(points)
        return np.einsum("ij,ij->i", values[self.mesh.triangles[tri]], bary)


def tautological_residual(family, f, metric=None, scheme="upwind"):
    """Per-level L2 residual of ``d_t u_t = -eta A_t u_t + X_t u_t`` for ``u_t = E(f) o phi_t``.

    ``u_t`` is sampled from the single extension ``E(f)`` on the level-0 mesh.
    The time derivative is the forward difference to the next level, so the
    residual is first order in the level spacing.

    Returns
    -------
    times : (N,) array
    residual : (N,) array
        ``||(u_{k+1} - u_k)/delta + eta A u_k - X u_k||_{L2(t_k)}``.
    """
    if len(family.times) < 3:
        raise ConfigurationError("tautological residual needs at least 3 levels")
    base = family.meshes[0]
    if metric is None:
        metric = MetricField.euclidean(base.n_triangles)
    sys0 = assemble_stiffness(base, metric)
    U = harmonic_extension(sys0, {family.loop_name: np.asarray(f, dtype=float)}, (family.loop_name,)).values
    loc = PointLocator(base)
    samples = []
    for k in range(len(family.times)):
        pts = family.meshes[k].nodes[family.loop]
        samples.append(U[family.loop] if k == 0 else loc.interpolate(U, pts))
    res = []
    for k in range(len(family.times) - 1):
        ops = pullback_dn(family, k, metric, scheme)
        dt = family.times[k + 1] - family.times[k]
        r = (samples[k + 1] - samples[k]) / dt + ops.eta * (ops.A @ samples[k]) - ops.X @ samples[k]
        res.append(np.sqrt(ops.inner(r, r)))
    return np.asarray(family.times[:-1]), np.asarray(res)


# -------------------------------------------------------- DN time derivative
def _mode_functions(theta, kmax):
    return np.column_stack([np.cos(k * theta) for k in range(1, kmax + 1)])


def dn_derivative_pair(family, t, delta, metric=None):
    """Central difference ``(A_{t+d} - A_{t-d}) / 2d`` and the analytic right side at ``t``."""
    plus = pullback_dn(family, t + delta, metric)
    minus = pullback_dn(family, t - delta, metric)
    mid = pullback_dn(family, t, metric)
    return (plus.A - minus.A) / (2 * delta), mid.derivative_formula(), mid


def dn_time_derivative_residual(family, level, metric=None, deltas=None, kmax=4, band=None, mode_tol=0.05,
                                trend=1.5):
    """Compare the finite-difference derivative of ``A_t`` with the analytic formula.

    Mode-wise: Rayleigh quotients on ``cos(k theta)``, ``k = 1..kmax``, at the
    smallest ``delta``.  Trend: band-limited ``H^0`` operator-norm residual for
    each ``delta``; every halving above three times the mesh floor must reduce
    it by ``trend``.  The floor is the residual at the smallest ``delta``
    after Richardson extrapolation of the central difference.
    """
    t = float(family.times[level]) if isinstance(level, (int, np.integer)) else float(level)
    if deltas is None:
        deltas = [0.4 * 0.5 ** j for j in range(5)]
    if band is None:
        band = 2 * kmax + 1
    deltas = sorted(deltas, reverse=True)
    if t - deltas[0] < 0:
        raise ConfigurationError("level too close to t = 0 for the requested central differences")
    fds, rhs, mid = [], None, None
    for d in deltas:
        fd, rhs, mid = dn_derivative_pair(family, t, d, metric)
        fds.append(fd)
    calc = mid.calculus
    residuals = [operator_norm(fd - rhs, 0, 0, calc, band=band, project_constants=True) for fd in fds]
    # Richardson: 4 fd(d/2) - fd(d) removes the delta^2 term
    rich = (4 * fds[-1] - fds[-2]) / 3
    floor = operator_norm(rich - rhs, 0, 0, calc, band=band, project_constants=True)
    ratios = [residuals[i] / max(residuals[i + 1], 1e-300) for i in range(len(residuals) - 1)]
    trend_ok = all(ratios[i] >= trend for i in range(len(ratios)) if residuals[i + 1] > 3 * floor)
    modes = _mode_functions(mid.theta, kmax)
    m = mid.mass
    lhs_q = np.einsum("ik,i,ik->k", modes, m, rich @ modes) / np.einsum("ik,i,ik->k", modes, m, modes)
    rhs_q = np.einsum("ik,i,ik->k", modes, m, rhs @ modes) / np.einsum("ik,i,ik->k", modes, m, modes)
    mode_err = np.abs(lhs_q - rhs_q) / np.maximum(np.abs(lhs_q), 1e-300)
    scale = operator_norm(rhs, 0, 0, calc, band=band, project_constants=True)
    passed = bool(np.all(mode_err <= mode_tol) and trend_ok)
    return IdentityReport("dn_time_derivative", float(residuals[-1]), float(residuals[-1] / max(scale, 1e-30)),
                          len(family.loop), passed, "bounded",
                          dict(t=t, deltas=list(deltas), residuals=[float(r) for r in residuals],
                               floor=float(floor), ratios=[float(r) for r in ratios],
                               mode_fd=lhs_q.tolist(), mode_formula=rhs_q.tolist(),
                               mode_rel_error=mode_err.tolist()))


# ------------------------------------------------------------ Rayleigh traces
@dataclass
class RayleighTrace:
    """Evolution record of ``lambda(t) = <B f, B f>_t / <f, f>_t``."""

    times: np.ndarray
    lam: np.ndarray
    norm_sq: np.ndarray
    energy: np.ndarray
    norm_half: np.ndarray
    norm_one: np.ndarray
    constants: dict = field(default_factory=dict)
    states: list = field(default_factory=list, repr=False)

    def bound(self, C1, C2):
        """``e^{C1 t} (lambda_0 + C2/C1) - C2/C1`` (``C1 = 0``: ``lambda_0 + C2 t``)."""
        t = self.times
        if C1 == 0:
            return self.lam[0] + C2 * t
        return np.exp(C1 * t) * (self.lam[0] + C2 / C1) - C2 / C1

    def write_csv(self, path):
        C1, C2 = self.constants.get("C1", 0.0), self.constants.get("C2", 0.0)
        bound = self.bound(C1, C2)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "lambda", "norm_half", "norm_one", "bound_value"])
            for row in zip(self.times, self.lam, self.norm_half, self.norm_one, bound):
                w.writerow([repr(float(x)) for x in row])


def level_operators(family, metric=None, scheme="upwind"):
    return [pullback_dn(family, k, metric, scheme) for k in range(len(family.times))]


def evolve(family, f, metric=None, operators=None, implicit=True, drift=True, frozen=False):
    """Evolve ``f`` through the levels; returns the list of states ``f_k``.

    Implicit: ``(I + delta B_k) f_{k+1} = f_k + delta (X_k + S_k) f_k``.
    Explicit: ``f_{k+1} = f_k + delta (-B_k + X_k + S_k) f_k``.
    ``drift=False`` drops ``X`` and ``S``; ``frozen`` uses level-0 operators
    throughout.
    """
    ops = operators if operators is not None else level_operators(family, metric)
    f = np.asarray(f, dtype=float)
    states = [f.copy()]
    n0 = np.sqrt(ops[0].inner(f, f))
    for k in range(len(family.times) - 1):
        op = ops[0] if frozen else ops[k]
        dt = family.times[k + 1] - family.times[k]
        B = op.B
        rhs = f.copy()
        if drift:
            rhs = rhs + dt * ((op.X + op.S) @ f)
        if implicit:
            f = np.linalg.solve(np.eye(len(f)) + dt * B, rhs)
        else:
            f = rhs - dt * (B @ states[-1])
            nk = np.sqrt(abs(op.inner(f, f)))
            if not np.isfinite(nk) or nk > 1e6 * max(n0, 1e-300):
                lmax = float(sla.eigh(op.form * np.outer(op.sqrt_eta, op.sqrt_eta), np.diag(op.mass),
                                      eigvals_only=True)[-1])
                raise StepSizeError(f"explicit stepping blew up at step {k} (norm {nk:.3e}); "
                                    f"reduce the step below {1.9 / lmax:.3e}", 1.9 / lmax)
        states.append(f.copy())
    return states


def rayleigh_trace(family, f, metric=None, operators=None, implicit=True, drift=True, frozen=False, C1=1.0):
    """Record ``lambda(t)`` and boundary norms along the evolution of ``f``."""
    f = np.asarray(f, dtype=float)
    if not np.any(f):
        raise ConfigurationError("rayleigh_trace needs f != 0")
    ops = operators if operators is not None else level_operators(family, metric)
    states = evolve(family, f, operators=ops, implicit=implicit, drift=drift, frozen=frozen)
    calc0 = ops[0].calculus
    lam, nsq, en, nh, n1 = [], [], [], [], []
    for k, fk in enumerate(states):
        op = ops[0] if frozen else ops[k]
        Bf = op.B @ fk
        ff = op.inner(fk, fk)
        lam.append(op.inner(Bf, Bf) / ff)
        nsq.append(ff)
        en.append(op.inner(Bf, fk))
        nh.append(hs_norm(fk, 0.5, calc0))
        n1.append(hs_norm(fk, 1.0, calc0))
    tr = RayleighTrace(np.asarray(family.times), np.array(lam), np.array(nsq), np.array(en), np.array(nh),
                       np.array(n1), states=states)
    tr.constants = fit_gronwall([tr], C1)
    return tr


def fit_gronwall(traces, C1=1.0):
    """Smallest ``C2 >= 0`` such that every trace obeys the Gronwall bound for the given ``C1``."""
    C2 = 0.0
    for tr in traces:
        t = tr.times[1:]
        grow = (np.exp(C1 * t) - 1) / C1 if C1 > 0 else t
        need = (tr.lam[1:] - np.exp(C1 * t) * tr.lam[0]) / grow
        C2 = max(C2, float(need.max(initial=0.0)))
    return {"C1": float(C1), "C2": C2}


def spd_rayleigh_inequality(dim, trials, seed=0, slack=1e-12):
    """Check ``<B^2 f, B f><f, f> >= <B f, B f><B f, f>`` for random PSD ``B``.

    Returns ``(passed, violations, worst_relative_gap)``.
    """
    if dim < 1:
        raise ConfigurationError("dim must be at least 1")
    rng = np.random.default_rng(seed)
    violations, worst = 0, np.inf
    for _ in range(trials):
        d = int(rng.integers(1, dim + 1))
        r = int(rng.integers(1, d + 1))
        G = rng.standard_normal((d, r)) * rng.lognormal(0, 1, r)
        B = G @ G.T
        f = rng.standard_normal(d)
        Bf = B @ f
        lhs = (B @ Bf) @ Bf * (f @ f)
        rhs = (Bf @ Bf) * (Bf @ f)
        gap = (lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
        worst = min(worst, gap)
        if gap < -slack:
            violations += 1
    return violations == 0, violations, float(worst)


# ----------------------------------------------------------- lower bound fit
@dataclass
class LowerBoundFit:
    """Constants of ``||f_t||_{1/2}^2 >= exp(-(C2 lambda + C3) t) N(f_0)`` for each reading of ``N``."""

    readings: dict
    lambdas: np.ndarray
    rates: dict


READINGS = {
    "one": lambda nh0, n10: n10,          # ||f_0||_1, as displayed
    "one_squared": lambda nh0, n10: n10 ** 2,
    "half_squared": lambda nh0, n10: nh0 ** 2,
}


def _envelope(lams, rates):
    """Smallest ``(C2, C3) >= 0`` with ``C2 lambda + C3 >= rate`` minimising the summed envelope."""
    lams = np.asarray(lams, dtype=float)
    rates = np.asarray(rates, dtype=float)
    if np.all(rates <= 0):
        return 0.0, 0.0
    c = np.array([lams.sum(), len(lams)])
    res = linprog(c, A_ub=-np.column_stack([lams, np.ones_like(lams)]), b_ub=-rates,
                  bounds=[(0, None), (0, None)], method="highs")
    if not res.success:
        raise FitError(f"envelope fit failed: {res.message}")
    return float(res.x[0]), float(res.x[1])


def lower_bound_fit(family, fs, metric=None, operators=None, drift=True):
    """Fit an exponential lower bound on the H^{1/2} norm along the evolution.

    ``lambda`` of each ``f`` is its initial quotient ``<B_0 f, B_0 f>/<f, f>``.
    Returns a fit per reading of the time-zero normalisation; a reading whose
    time-zero inequality fails for some ``f`` is flagged ``anchor_ok=False``.
    """
    ops = operators if operators is not None else level_operators(family, metric)
    calc0 = ops[0].calculus
    lams, curves = [], []
    for f in fs:
        states = evolve(family, f, operators=ops, drift=drift)
        B0f = ops[0].B @ states[0]
        lams.append(ops[0].inner(B0f, B0f) / ops[0].inner(states[0], states[0]))
        curves.append(np.array([hs_norm(s, 0.5, calc0) ** 2 for s in states]))
    t = np.asarray(family.times)
    out, rates = {}, {}
    for name, norm0 in READINGS.items():
        need, anchor = [], True
        for f, cur in zip(fs, curves):
            N0 = norm0(hs_norm(f, 0.5, calc0), hs_norm(f, 1.0, calc0))
            anchor &= bool(cur[0] >= N0 * (1 - 1e-12))
            need.append(float(np.max(-np.log(cur[1:] / N0) / t[1:])))
        C2, C3 = _envelope(lams, need)
        out[name] = {"C2": C2, "C3": C3, "anchor_ok": anchor}
        rates[name] = np.array(need)
    return LowerBoundFit(out, np.array(lams), rates)


def norm_equivalence_constants(operators, C=1.0, band=16):
    """Per level, the range of ``(<B f, f> + C ||f||_0^2) / ||f||_{1/2}^2`` over the low band."""
    out = []
    for op in operators:
        calc = op.calculus
        E = calc.eigenvectors[:, :band]
        Bform = E.T @ (op.mass[:, None] * op.B) @ E
        Q = 0.5 * (Bform + Bform.T) + C * (E.T @ (op.mass[:, None] * E))
        N = np.diag(np.sqrt(1 + calc.eigenvalues[:band]))
        ev = sla.eigh(Q, N, eigvals_only=True)
        out.append((float(ev[0]), float(ev[-1])))
    return out
