"""Spectral Sobolev scale on closed boundary curves.

Each loop carries a lumped (diagonal) mass matrix ``M`` and the P1 stiffness
``L`` of its Laplace-Beltrami operator.  The generalized eigenproblem
``L e = lambda M e`` gives mass-orthonormal modes, and

    ||f||_s^2 = sum_i (1 + lambda_i)^s a_i^2,   a = E^T M f.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, DomainError

S_MIN, S_MAX = -2.0, 2.0


def _check_s(s):
    if not S_MIN - 1e-12 <= s <= S_MAX + 1e-12:
        raise DomainError(f"Sobolev exponent {s} outside [{S_MIN}, {S_MAX}]")


def loop_edge_lengths(mesh, metric, loop):
    """Metric lengths of the edges ``(loop[i], loop[i+1])``.

    An edge between two triangles (an interface) uses the mean of the two
    one-sided lengths.
    """
    nxt = np.roll(loop, -1)
    d = mesh.nodes[nxt] - mesh.nodes[loop]
    et = mesh.edge_triangles
    tens = metric.tensors if metric is not None else None
    out = np.empty(len(loop))
    for i, (a, b) in enumerate(zip(loop.tolist(), nxt.tolist())):
        if tens is None:
            out[i] = np.hypot(*d[i])
            continue
        tris = et[(a, b) if a < b else (b, a)]
        out[i] = np.mean([np.sqrt(d[i] @ tens[t] @ d[i]) for t in tris])
    return out


@dataclass(frozen=True, eq=False)
class BoundaryCalculus:
    """Mass, Laplacian and spectral data of one closed loop.

    Parameters
    ----------
    lengths : (n,) array
        Length of edge ``i`` joining loop nodes ``i`` and ``i + 1``.
    nodes : (n,) int array, optional
        Global indices of the loop nodes.
    """

    lengths: np.ndarray
    nodes: np.ndarray | None = None

    def __post_init__(self):
        ell = np.array(self.lengths, dtype=float)
        if ell.ndim != 1 or len(ell) < 3 or np.any(ell <= 0):
            raise DimensionError("a loop needs at least 3 edges of positive length")
        ell.setflags(write=False)
        object.__setattr__(self, "lengths", ell)

    @classmethod
    def from_loop(cls, mesh, metric=None, loop="outer"):
        nodes = mesh.loop(loop) if isinstance(loop, str) else np.asarray(loop)
        return cls(loop_edge_lengths(mesh, metric, nodes), np.asarray(nodes))

    @property
    def n(self):
        return len(self.lengths)

    @cached_property
    def mass(self):
        """Diagonal of the lumped mass matrix."""
        return 0.5 * (self.lengths + np.roll(self.lengths, 1))

    @property
    def volume(self):
        return float(self.lengths.sum())

    @cached_property
    def stiffness(self):
        n = self.n
        k = 1.0 / self.lengths
        L = np.zeros((n, n))
        i = np.arange(n)
        j = (i + 1) % n
        np.add.at(L, (i, i), k)
        np.add.at(L, (j, j), k)
        np.add.at(L, (i, j), -k)
        np.add.at(L, (j, i), -k)
        return L

    @cached_property
    def laplacian(self):
        """Function-to-function matrix ``M^{-1} L``."""
        return self.stiffness / self.mass[:, None]

    @cached_property
    def _eig(self):
        ms = 1.0 / np.sqrt(self.mass)
        lam, V = np.linalg.eigh(ms[:, None] * self.stiffness * ms[None, :])
        lam = np.clip(lam, 0.0, None)
        lam[0] = 0.0
        E = ms[:, None] * V
        # fix the sign of the constant mode
        E[:, 0] *= np.sign(E[0, 0])
        lam.setflags(write=False)
        E.setflags(write=False)
        return lam, E

    @property
    def eigenvalues(self):
        return self._eig[0]

    @property
    def eigenvectors(self):
        """Mass-orthonormal eigenvectors as columns."""
        return self._eig[1]

    def _vec(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape[0] != self.n:
            raise DimensionError(f"function has {f.shape[0]} values, loop has {self.n} nodes")
        return f

    def inner(self, f, g):
        return float(np.dot(self._vec(f) * self.mass, self._vec(g)))

    def coefficients(self, f):
        f = self._vec(f)
        return self.eigenvectors.T @ (self.mass * f if f.ndim == 1 else self.mass[:, None] * f)

    def synthesize(self, a):
        return self.eigenvectors @ a

    def weights(self, s, homogeneous=False):
        lam = self.eigenvalues
        if homogeneous:
            w = np.zeros_like(lam)
            w[1:] = lam[1:] ** s
            return w
        return (1.0 + lam) ** s

    def norm(self, f, s):
        return hs_norm(f, s, self)

    def apply_power(self, f, s, homogeneous=False):
        return frac_power_apply(f, s, self, homogeneous)

    def power_matrix(self, s, homogeneous=False):
        """Matrix of ``(I + Delta)^s`` (or ``Delta^s``) acting on nodal values."""
        E = self.eigenvectors
        return (E * self.weights(s, homogeneous)) @ (E.T * self.mass)

    def to_function(self, form):
        """Identify a boundary form (pairing vector) with a function via ``M^{-1}``."""
        form = np.asarray(form, dtype=float)
        return form / (self.mass if form.ndim == 1 else self.mass[:, None])

    def derivative(self, f):
        """Edge-wise arclength derivative of nodal values."""
        f = self._vec(f)
        return (np.roll(f, -1) - f) / self.lengths

    def scale(self, s):
        return SobolevScale(s, self)


@dataclass(frozen=True)
class SobolevScale:
    """The space ``H^s`` of one loop."""

    s: float
    calculus: BoundaryCalculus

    def __post_init__(self):
        _check_s(self.s)

    def norm(self, f):
        return hs_norm(f, self.s, self.calculus)


def hs_norm(f, s, calc):
    """``(sum_i (1 + lambda_i)^s a_i^2)^{1/2}`` with ``a = E^T M f``."""
    _check_s(s)
    a = calc.coefficients(f)
    return float(np.sqrt(np.sum(calc.weights(s) * a * a)))


def frac_power_apply(f, s, calc, homogeneous=False):
    """Apply ``(I + Delta)^s`` spectrally; ``homogeneous`` uses ``Delta^s`` with the zero mode removed."""
    _check_s(s)
    a = calc.coefficients(f)
    w = calc.weights(s, homogeneous)
    return calc.synthesize(w * a if a.ndim == 1 else w[:, None] * a)


def modal_matrix(op, calc_from, calc_to=None):
    """Matrix of a function-to-function operator in the mass-orthonormal bases."""
    calc_to = calc_from if calc_to is None else calc_to
    op = np.asarray(op, dtype=float)
    if op.shape != (calc_to.n, calc_from.n):
        raise DimensionError(f"operator shape {op.shape} does not match loops ({calc_to.n}, {calc_from.n})")
    return calc_to.eigenvectors.T @ (calc_to.mass[:, None] * op) @ calc_from.eigenvectors


def operator_norm(op, s_from, s_to, calc, calc_to=None, project_constants=False, band=None):
    """Norm of ``op`` as a map ``H^{s_from} -> H^{s_to}``.

    ``op`` acts on nodal values.  The norm is the largest singular value of
    ``(I+Delta)^{s_to/2} op (I+Delta)^{-s_from/2}`` in the mass inner product.

    Parameters
    ----------
    project_constants : bool
        Drop the constant mode on both sides.
    band : int, optional
        Restrict to the ``band`` lowest modes of each loop.
    """
    _check_s(s_from)
    _check_s(s_to)
    calc_to = calc if calc_to is None else calc_to
    A = modal_matrix(op, calc, calc_to)
    wl = calc_to.weights(s_to / 2)
    wr = calc.weights(-s_from / 2)
    A = wl[:, None] * A * wr[None, :]
    lo = 1 if project_constants else 0
    hi_to = calc_to.n if band is None else min(calc_to.n, band)
    hi_from = calc.n if band is None else min(calc.n, band)
    A = A[lo:hi_to, lo:hi_from]
    if A.size == 0:
        return 0.0
    return float(np.linalg.norm(A, 2))


@dataclass(frozen=True)
class LipschitzApproximation:
    values: np.ndarray
    cutoff: float
    modes: int
    w1inf: float
    error: float


def lipschitz_approximation(f, eps, calc):
    """Smallest spectral truncation with ``||f - f_eps||_{1/2} <= eps``.

    Whole eigenvalue clusters are kept or dropped together.  The discrete
    ``W^{1,inf}`` norm of the result is ``max|f| + max|df/ds|``.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    a = calc.coefficients(f)
    lam = calc.eigenvalues
    e2 = (1 + lam) ** 0.5 * a * a
    total = float(np.sqrt(e2.sum()))
    if eps >= total:
        z = np.zeros(calc.n)
        return LipschitzApproximation(z, 0.0, 0, 0.0, total)
    # cluster boundaries: indices where the eigenvalue jumps
    jumps = np.flatnonzero(np.diff(lam) > 1e-8 * np.maximum(1.0, lam[1:])) + 1
    ends = np.append(jumps, calc.n)
    tail = np.cumsum(e2[::-1])[::-1]
    for end in ends:
        err = float(np.sqrt(tail[end])) if end < calc.n else 0.0
        if err <= eps:
            break
    keep = np.zeros_like(a)
    keep[:end] = a[:end]
    v = calc.synthesize(keep)
    w = float(np.max(np.abs(v)) + np.max(np.abs(calc.derivative(v))))
    return LipschitzApproximation(v, float(lam[end - 1]), int(end), w, err)
