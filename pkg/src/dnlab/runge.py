"""Constructive Runge approximation on the core boundary.

Harmonic functions on ``M`` restricted to ``sigma1`` are dense; this module
builds approximating boundary data on ``outer`` by repeated adjoint steps,
tracks the residual and cost, and compares the residual decay with the
logarithmic-integral envelope of the scalar recurrence
``sigma_{k+1} = sigma_k (1 + C exp(-sigma_k))``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, optimize

from .errors import ConfigurationError, DomainError, FitError, StagnationError
from .sobolev import hs_norm
from .split import SplitOperators


# ------------------------------------------------------------------ li and li^-1
class LiEvaluator:
    """Logarithmic integral ``li(t) = int_2^t dtau / log(tau)`` and its inverse."""

    def __init__(self, rtol=1e-12):
        self.rtol = rtol
        self._nodes, self._weights = np.polynomial.legendre.leggauss(24)

    def li(self, t):
        t = float(t)
        if t <= 1.0:
            raise DomainError(f"li is undefined at t = {t} (singularity at 1, defined for t > 1)")
        if t == 2.0:
            return 0.0
        lo, hi = (2.0, t) if t > 2 else (t, 2.0)
        # split geometrically so each piece is smooth and short relative to its position
        pts = [lo]
        while pts[-1] * 16 < hi:
            pts.append(pts[-1] * 16)
        pts.append(hi)
        total = math.fsum(integrate.quad(lambda x: 1.0 / math.log(x), a, b, epsabs=0.0, epsrel=self.rtol,
                                         limit=200)[0] for a, b in zip(pts[:-1], pts[1:]))
        return total if t > 2 else -total

    def _segment(self, a, b):
        """Gauss-Legendre ``int_a^b dtau/log tau`` for arrays of short intervals."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        x = mid[..., None] + half[..., None] * self._nodes
        return half * np.sum(self._weights / np.log(x), axis=-1)

    def li_inv(self, y):
        """Inverse of ``li`` on ``[2, inf)`` by bracketed Newton with ``(li^-1)' = log(li^-1)``."""
        y = float(y)
        if y < 0:
            raise DomainError(f"li_inv needs y >= 0 (got {y})")
        if y == 0:
            return 2.0
        lo, hi = 2.0, max(4.0, 2.0 * y * max(math.log(y + 2.0), 1.0))
        while self.li(hi) < y:
            lo, hi = hi, hi * 4
        x = min(max(y * math.log(max(y, 2.0)), lo), hi)
        for _ in range(100):
            fx = self.li(x) - y
            if fx > 0:
                hi = x
            else:
                lo = x
            step = fx * math.log(x)
            xn = x - step
            if not lo < xn < hi:
                xn = 0.5 * (lo + hi)
            if abs(xn - x) <= 1e-15 * x:
                return xn
            x = xn
        return x

    def li_inv_progression(self, y):
        """``li_inv`` for an increasing array of targets (vectorised, shared quadrature)."""
        y = np.asarray(y, dtype=float)
        if np.any(y < 0):
            raise DomainError("li_inv needs y >= 0")
        if np.any(np.diff(y) < 0):
            raise DomainError("targets must be non-decreasing")
        x0 = self.li_inv(y[0])
        x = np.maximum(y * np.log(np.maximum(y, 2.0)), x0)
        x[0] = x0
        base = self.li(x0)
        for _ in range(60):
            x = np.maximum.accumulate(np.maximum(x, x0))
            pieces = self._segment(x[:-1], x[1:])
            lx = base + np.concatenate([[0.0], np.cumsum(pieces)])
            step = (lx - y) * np.log(x)
            x = np.maximum(x - step, 0.5 * (x + x0))
            if np.max(np.abs(step) / x) < 1e-15:
                break
        return x


_LI = LiEvaluator()


def li(t):
    return _LI.li(t)


def li_inv(y):
    return _LI.li_inv(y)


# ---------------------------------------------------------------- recurrence
@dataclass
class RecurrenceResult:
    sigma: np.ndarray
    overflow: bool


def recurrence_simulate(sigma0, C, steps):
    """Forward iteration of ``sigma_{k+1} = sigma_k (1 + C exp(-sigma_k))``."""
    if sigma0 <= 0 or C < 0:
        raise ConfigurationError("need sigma0 > 0 and C >= 0")
    out = np.empty(steps + 1)
    s = float(sigma0)
    out[0] = s
    for k in range(1, steps + 1):
        s_new = s * (1.0 + C * math.exp(-s))
        if not math.isfinite(s_new):
            return RecurrenceResult(out[:k], True)
        s = s_new
        out[k] = s
    return RecurrenceResult(out, False)


def precondition_threshold(C):
    """Smallest ``x >= 1`` with ``x exp(-x) <= 1/(12 C)``."""
    if C <= 0:
        return 1.0
    target = 12.0 * C
    if target <= math.e:
        return 1.0
    return optimize.brentq(lambda x: x - math.log(x) - math.log(target), 1.0, 10.0 + 2 * math.log(target))


def li_bounds(sigma0, C, steps):
    """Lower sandwich ``log li^-1(C k + li(e^{sigma0}))`` for ``k = 0..steps``."""
    if C == 0:
        return np.full(steps + 1, float(sigma0))
    D = _LI.li(math.exp(sigma0))
    x = _LI.li_inv_progression(C * np.arange(steps + 1) + D)
    return np.log(x)


@dataclass
class SandwichReport:
    passed: bool
    first_violation: int | None
    lower_slack: float
    upper_slack: float
    roundtrip: float
    steps: int


def recurrence_sandwich_check(sigma0, C, steps, check_precondition=True):
    """Check ``L_k <= sigma_k <= L_k + 1`` at every ``k``.

    Raises
    ------
    ConfigurationError
        If ``sigma0`` is below the smallness threshold ``theta e^{-theta} <= 1/(12C)``.
    """
    if check_precondition:
        thr = precondition_threshold(C)
        if C > 0 and (sigma0 < thr or sigma0 * math.exp(-sigma0) > 1 / (12 * C)):
            raise ConfigurationError(
                f"sigma0 = {sigma0} violates the smallness condition theta*exp(-theta) <= 1/(12C) "
                f"(need sigma0 >= {thr:.6g} for C = {C})")
    sig = recurrence_simulate(sigma0, C, steps).sigma
    lo = li_bounds(sigma0, C, len(sig) - 1)
    tol = 1e-12 * np.maximum(1.0, np.abs(sig))
    low_ok = sig >= lo - tol
    up_ok = sig <= lo + 1 + tol
    bad = np.flatnonzero(~(low_ok & up_ok))
    # round-trip accuracy of li / li_inv on the sampled targets
    probe = np.unique(np.linspace(0, len(sig) - 1, 7).astype(int))
    rt = max(abs(_LI.li_inv(_LI.li(math.exp(lo[k]))) - math.exp(lo[k])) / math.exp(lo[k]) for k in probe)
    return SandwichReport(len(bad) == 0, int(bad[0]) if len(bad) else None, float(np.min(sig - lo)),
                          float(np.min(lo + 1 - sig)), float(rt), len(sig) - 1)


# ------------------------------------------------------------ operator bundle
@dataclass
class FitConstants:
    """Measured constants with the experiment that produced them."""

    K: float | None = None
    C: float | None = None
    C1: float | None = None
    C2: float | None = None
    C3: float | None = None
    alpha: float | None = None
    sigma0: float | None = None
    provenance: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"K": self.K, "C": self.C, "sigma0": self.sigma0, "alpha": self.alpha})

    def as_dict(self):
        return asdict(self)


class RungeOperators:
    """Restriction ``T`` to ``sigma1``, its mass adjoint and the step operators."""

    def __init__(self, mesh, metric=None):
        self.split = SplitOperators(mesh, metric)
        self.cb = self.split.calc_outer
        self.cs = self.split.calc_sigma

    @cached_property
    def T(self):
        return self.split.restriction

    @cached_property
    def Tstar(self):
        return (self.T.T * self.cs.mass[None, :]) / self.cb.mass[:, None]

    @cached_property
    def A(self):
        """``I + Lambda_1`` on ``sigma1`` (``Lambda_1`` the DN map of the core)."""
        return np.eye(self.cs.n) + self.split.LambdaSigma.matrix

    @cached_property
    def resolvent0(self):
        """``(I + Lambda_0)^{-1}`` on ``outer``."""
        return np.linalg.inv(np.eye(self.cb.n) + self.split.Lambda.matrix)

    @cached_property
    def half_gram(self):
        """Gram matrix of the ``H^{1/2}`` inner product on ``sigma1``."""
        E = self.cs.eigenvectors
        W = (self.cs.mass[:, None] * E) * np.sqrt(1 + self.cs.eigenvalues)[None, :]
        return W @ (E.T * self.cs.mass[None, :])

    def norm(self, v, s=0.5):
        return hs_norm(v, s, self.cs)

    def outer_norm(self, u, s=0.5):
        return hs_norm(u, s, self.cb)


# ----------------------------------------------------- adjoint lower bound
def adjoint_lower_bound_experiment(ops, fs=None, reliable=1e-12):
    """Fit the smallest ``K`` with ``||T* f||_{-1/2}^2 >= exp(-K lambda) ||f||_{-1/2}^2``.

    ``lambda = ||f||_0^2 / ||f||_{-1/2}^2``.  By default ``fs`` are all the
    boundary modes of ``sigma1``.  Pairs whose ratio is below ``reliable`` are
    at round-off level and are excluded from the fit (reported separately).
    """
    cs, cb = ops.cs, ops.cb
    if fs is None:
        fs = cs.eigenvectors.T
    fs = np.atleast_2d(np.asarray(fs, dtype=float))
    lam, ratio = [], []
    for f in fs:
        nf = hs_norm(f, -0.5, cs) ** 2
        lam.append(hs_norm(f, 0.0, cs) ** 2 / nf)
        ratio.append(hs_norm(ops.Tstar @ f, -0.5, cb) ** 2 / nf)
    lam, ratio = np.array(lam), np.array(ratio)
    ok = ratio > reliable
    if not np.any(ok):
        raise FitError("no reliable ratios for the adjoint lower bound")
    rates = -np.log(ratio[ok]) / lam[ok]
    K = float(max(rates.max(), 0.0))
    return FitConstants(K=K, provenance={"experiment": "adjoint_lower_bound", "lambda": lam.tolist(),
                                         "ratio": ratio.tolist(), "used": ok.tolist()})


# --------------------------------------------------------------- Runge steps
@dataclass
class StepResult:
    u: np.ndarray
    v_next: np.ndarray
    mu: float
    sigma: float
    smooth_ok: bool
    quotient: float


def runge_step(v, K, lam, ops, C=1.0, exact=False, line_search=True, grid=25):
    """One adjoint step on ``sigma1`` data ``v``.

    ``u = sigma (I + Lambda_0)^{-1} T* (A v)``; ``sigma`` is chosen among the
    nominal ``exp(-K lam)``, a geometric grid up to 1 and the clipped optimum,
    preferring candidates whose residual obeys ``||r||_1^2 / ||r||_{1/2}^2 <=
    lam (1 + C exp(-K lam))``.  ``exact`` replaces the step by the
    ``H^{1/2}``-least-squares solution.

    Returns ``StepResult`` with ``mu = 1 - ||v - T u||_{1/2}^2`` and the
    renormalised residual ``v_next``.
    """
    v = np.asarray(v, dtype=float)
    nv = ops.norm(v)
    if nv == 0:
        raise DomainError("runge_step needs v != 0")
    v = v / nv
    bound = lam * (1 + C * math.exp(-K * lam))
    if exact:
        G = ops.half_gram
        L = np.linalg.cholesky(0.5 * (G + G.T))
        u, *_ = np.linalg.lstsq(L.T @ ops.T, L.T @ v, rcond=1e-13)
        cands = [(1.0, u)]
    else:
        d = ops.resolvent0 @ (ops.Tstar @ (ops.A @ v))
        Td = ops.T @ d
        sig_p = math.exp(-K * lam)
        sig = [sig_p]
        if line_search:
            sig += list(np.geomspace(max(sig_p, 1e-300), 1.0, grid))
            G = ops.half_gram
            den = float(Td @ G @ Td)
            if den > 0:
                s_opt = float(v @ G @ Td) / den
                sig.append(min(max(s_opt, sig_p), 1.0))
        cands = [(s, s * d) for s in sorted(set(sig))]
    trials = []
    for s, u in cands:
        r = v - ops.T @ u
        nr = ops.norm(r)
        mu = 1.0 - nr ** 2
        q = ops.norm(r, 1.0) ** 2 / nr ** 2 if nr > 0 else 0.0
        trials.append((s, u, r, nr, mu, q))
    good = [t for t in trials if t[4] > 0]
    if not good:
        raise StagnationError("no tested scaling decreased the residual",
                              [(t[0], t[4], t[5]) for t in trials])
    smooth = [t for t in good if t[5] <= bound * (1 + 1e-12)]
    pool = smooth if smooth else good
    s, u, r, nr, mu, q = max(pool, key=lambda t: t[4])
    v_next = r / nr if nr > 0 else r
    return StepResult(u * nv, v_next, float(mu), float(s), bool(smooth), float(q))


@dataclass
class RungeTrace:
    """Per-iteration record of the Runge scheme."""

    lam: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    mu_rate: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    log_product: list = field(default_factory=list)
    smooth_ok: list = field(default_factory=list)
    converged: bool = False
    u: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def relative_residual(self):
        r = np.asarray(self.residual)
        return r / r[0]

    def monotone(self):
        r = np.asarray(self.residual)
        return bool(np.all(np.diff(r) <= 1e-14 * r[0]))

    def product_defect(self):
        """``|residual_i^2 / residual_0^2 - prod_{k<i}(1 - mu_k)|`` (relative, max over i)."""
        r = np.asarray(self.residual)
        lp = np.asarray(self.log_product)
        return float(np.max(np.abs((r / r[0]) ** 2 - np.exp(lp)) / np.exp(lp)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "lambda", "mu", "residual", "cost"])
            for i, row in enumerate(zip(self.lam, self.mu + [float("nan")], self.residual, self.cost)):
                w.writerow([i] + [repr(float(x)) for x in row])


def runge_iterate(f, eps, constants, ops, max_iter=1000, exact=False, line_search=True):
    """Approximate ``f`` on ``sigma1`` by restrictions ``T u`` to relative ``H^{1/2}`` residual ``eps``.

    The frequency parameter follows ``lambda_{i+1} = lambda_i (1 + C e^{-K
    lambda_i})``, raised to the residual's measured ``H^1/H^{1/2}`` quotient
    when that is larger (the step hypothesis must hold).
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    K = constants.K
    C = constants.C if constants.C is not None else 1.0
    if K is None:
        raise ConfigurationError("constants.K is required (run the adjoint lower-bound experiment)")
    f = np.asarray(f, dtype=float)
    nf = ops.norm(f)
    v = f / nf
    lam = ops.norm(v, 1.0) ** 2
    tr = RungeTrace(config={"K": K, "C": C, "eps": eps, "norm_convention": "H^{1/2}"})
    utot = np.zeros(ops.cb.n)
    w = 1.0
    logp = 0.0
    tr.lam.append(lam)
    tr.residual.append(nf)
    tr.cost.append(0.0)
    tr.log_product.append(0.0)
    for _ in range(max_iter):
        if tr.residual[-1] <= eps * nf:
            tr.converged = True
            break
        st = runge_step(v, K, lam, ops, C, exact, line_search)
        utot = utot + nf * w * st.u
        logp += math.log1p(-st.mu) if st.mu < 1 else -np.inf
        w = math.exp(0.5 * logp)
        v = st.v_next
        tr.mu.append(st.mu)
        tr.mu_rate.append(math.exp(-K * lam))
        tr.smooth_ok.append(st.smooth_ok)
        lam = max(lam * (1 + C * math.exp(-K * lam)), st.quotient)
        tr.lam.append(lam)
        tr.residual.append(ops.norm(f - ops.T @ utot))
        tr.cost.append(ops.outer_norm(utot))
        tr.log_product.append(logp)
        if st.mu >= 1:
            tr.converged = True
            break
    else:
        tr.converged = tr.residual[-1] <= eps * nf
    tr.u = utot
    return tr


def li_envelope(sigma0, C, n):
    """``sigma0 / log(li^-1(C i + li(e^{sigma0})))`` for ``i = 0..n-1``."""
    return sigma0 / li_bounds(sigma0, C, n - 1)


def fit_envelope_sigma0(trace, C=None, lo=None, hi=200.0):
    """Smallest ``sigma0`` whose li-envelope dominates ``prod (1 - mu_k)`` at every step."""
    C = trace.config.get("C", 1.0) if C is None else C
    lo = math.log(2.0) * (1 + 1e-9) if lo is None else lo  # li(e^{sigma0}) >= 0
    prod = np.exp(np.asarray(trace.log_product))
    n = len(prod)

    def ok(s0):
        return bool(np.all(prod <= li_envelope(s0, C, n) * (1 + 1e-12)))

    if not ok(hi):
        raise FitError("no sigma0 below the search limit dominates the residual product")
    if ok(lo):
        return lo
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def fit_alpha(eps_values, costs, sigma0):
    """Regression of ``log log cost`` on ``log(sigma0/eps)``: the exponent in ``e^{(sigma0/eps)^alpha}``."""
    e = np.asarray(eps_values, dtype=float)
    c = np.asarray(costs, dtype=float)
    ok = c > math.e
    if ok.sum() < 2:
        raise FitError("need at least two costs above e to fit the cost exponent")
    x = np.log(sigma0 / e[ok])
    y = np.log(np.log(c[ok]))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def reference_operators(resolution=32, core_radius=0.5, metric=None):
    """Disk of radius 1 with a core of radius ``core_radius``; ``M \\ Sigma_1`` is the annulus."""
    from .geometry.mesh import build_disk

    mesh = build_disk(1.0, resolution, sigma1_radius=core_radius)
    return RungeOperators(mesh, metric)


def tent(theta, width=1.0, center=0.0):
    """Lipschitz tent ``max(0, 1 - |theta - center| / width)`` on the circle."""
    d = np.abs(np.angle(np.exp(1j * (np.asarray(theta) - center))))
    return np.maximum(0.0, 1.0 - d / width)
