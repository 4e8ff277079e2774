"""P1 stiffness systems, harmonic extensions and Dirichlet-Neumann operators.

DN maps are boundary Schur complements of the stiffness matrix, and Neumann
data is the residual of the stiffness rows at boundary nodes.  With these
conventions the transmission and difference identities between DN maps of
subdomains hold as exact matrix identities.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DimensionError, DomainError, GeometryError, SolverError
from .geometry.mesh import ANNULUS, EXTERIOR, INCLUSION
from .geometry.metric import MetricField
from .sobolev import BoundaryCalculus

DOMAINS = {
    "M": None,
    "exterior": frozenset({EXTERIOR}),
    "core": frozenset({ANNULUS, INCLUSION}),
    "inclusion": frozenset({INCLUSION}),
}


def local_stiffness(nodes, triangles, metric_tensors):
    """Element matrices ``area * G (sqrt(det g) g^{-1}) G^T`` for P1 gradients ``G``."""
    p = nodes[triangles]
    B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edge vectors
    det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
    if np.any(det <= 0):
        bad = int(np.argmin(det))
        raise GeometryError(f"cannot assemble: triangle {bad} has non-positive area {0.5 * det[bad]:.3e}")
    Binv = np.linalg.inv(B)
    grads = np.empty((len(triangles), 3, 2))
    grads[:, 1:] = Binv
    grads[:, 0] = -Binv.sum(axis=1)
    g = metric_tensors
    sdet = np.sqrt(g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0])
    C = sdet[:, None, None] * np.linalg.inv(g)
    Ke = 0.5 * det[:, None, None] * np.einsum("tia,tab,tjb->tij", grads, C, grads)
    # exact zero row sums
    off = Ke.copy()
    idx = np.arange(3)
    off[:, idx, idx] = 0.0
    Ke[:, idx, idx] = -off.sum(axis=2)
    return Ke


@dataclass(eq=False)
class StiffnessSystem:
    """Global stiffness matrix of a (sub)domain plus cached interior factorizations.

    Parameters
    ----------
    mesh : TriMesh
    metric : MetricField
    regions : frozenset or None
        Region tags of the triangles that make up the subdomain (None: all).
    """

    mesh: object
    metric: MetricField
    regions: frozenset | None = None
    _factors: dict = field(default_factory=dict, init=False, repr=False)
    _lock: object = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        if self.metric.n_triangles != self.mesh.n_triangles:
            raise DimensionError("metric and mesh disagree on the number of triangles")

    @cached_property
    def triangle_mask(self):
        if self.regions is None:
            return np.ones(self.mesh.n_triangles, dtype=bool)
        return np.isin(self.mesh.regions, list(self.regions))

    @cached_property
    def active(self):
        a = np.zeros(self.mesh.n_nodes, dtype=bool)
        a[self.mesh.triangles[self.triangle_mask].ravel()] = True
        return a

    @cached_property
    def element_matrices(self):
        m = self.triangle_mask
        return local_stiffness(self.mesh.nodes, self.mesh.triangles[m], self.metric.tensors[m])

    @cached_property
    def K(self):
        t = self.mesh.triangles[self.triangle_mask]
        Ke = self.element_matrices
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = self.mesh.n_nodes
        return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))

    @cached_property
    def loops(self):
        """Named boundary loops of the subdomain (mesh loops and interfaces)."""
        mesh = self.mesh
        if self.regions is None:
            found = mesh._mask_boundary(np.ones(mesh.n_triangles, dtype=bool))
        else:
            found = mesh._mask_boundary(self.triangle_mask)
        named = dict(mesh.loops)
        named.update(mesh.interfaces)
        out = {}
        for lp in found:
            key = frozenset(lp.tolist())
            for name, nodes in named.items():
                if len(nodes) == len(lp) and frozenset(nodes.tolist()) == key:
                    out[name] = nodes
                    break
            else:
                raise DomainError("subdomain has an unnamed boundary loop")
        return out

    def loop_nodes(self, names):
        names = [names] if isinstance(names, str) else list(names)
        for nm in names:
            if nm not in self.loops:
                raise DomainError(f"{nm!r} is not a boundary loop of this subdomain (have {sorted(self.loops)})")
        if not names:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.loops[nm] for nm in names])

    def calculus(self, name):
        """Boundary calculus of a loop with lengths measured by this system's metric."""
        key = ("calc", name)
        if key not in self._factors:
            self._factors[key] = BoundaryCalculus.from_loop(self.mesh, self.metric, self.mesh.loop(name))
        return self._factors[key]

    def subsystem(self, domain):
        """Stiffness system of a named subdomain: ``M``, ``exterior``, ``core`` or ``inclusion``."""
        if domain not in DOMAINS:
            raise DomainError(f"unknown subdomain {domain!r}")
        key = ("sub", domain)
        if key not in self._factors:
            regs = DOMAINS[domain]
            self._factors[key] = self if regs == self.regions else StiffnessSystem(self.mesh, self.metric, regs)
        return self._factors[key]

    def factor(self, dirichlet):
        """Interior index set and LU factorization of ``K_II`` for a Dirichlet loop set."""
        key = tuple(sorted(set(dirichlet)))
        with self._lock:
            if key in self._factors:
                return self._factors[key]
            D = self.loop_nodes(key)
            mask = self.active.copy()
            mask[D] = False
            I = np.flatnonzero(mask)
            Kc = self.K.tocsc()
            KII = Kc[I][:, I].tocsc()
            try:
                lu = splu(KII) if len(I) else None
            except RuntimeError as exc:
                raise SolverError(f"interior block singular for Dirichlet loops {key}: {exc}") from exc
            if lu is not None:
                ud = np.abs(lu.U.diagonal())
                if ud.min() <= 1e-13 * ud.max():
                    raise SolverError(f"interior block singular for Dirichlet loops {key}")
            out = (I, lu)
            self._factors[key] = out
            return out

    def solve_interior(self, dirichlet, rhs):
        I, lu = self.factor(dirichlet)
        return lu.solve(np.asarray(rhs, dtype=float)) if lu is not None else np.zeros((0,) + np.shape(rhs)[1:])

    def extension_matrix(self, dirichlet, source, target_nodes):
        """Dense map from values on loops ``source`` to the extension at ``target_nodes``.

        Loops in ``dirichlet`` but not in ``source`` carry zero data.
        """
        source = [source] if isinstance(source, str) else list(source)
        I, lu = self.factor(dirichlet)
        S = self.loop_nodes(source)
        target_nodes = np.asarray(target_nodes)
        out = np.zeros((len(target_nodes), len(S)))
        pos = {int(n): k for k, n in enumerate(S)}
        for r, n in enumerate(target_nodes.tolist()):
            if n in pos:
                out[r, pos[n]] = 1.0
        ipos = np.full(self.mesh.n_nodes, -1)
        ipos[I] = np.arange(len(I))
        rows = ipos[target_nodes]
        sel = rows >= 0
        if np.any(sel) and len(I):
            KIS = self.K[I][:, S].toarray()
            X = -lu.solve(KIS)
            out[sel] = X[rows[sel]]
        return out


def assemble_stiffness(mesh, metric=None, regions=None):
    """P1 Galerkin stiffness of the Laplace-Beltrami operator of ``metric``."""
    if metric is None:
        metric = MetricField.euclidean(mesh.n_triangles)
    return StiffnessSystem(mesh, metric, None if regions is None else frozenset(regions))


@dataclass(frozen=True, eq=False)
class HarmonicField:
    """Nodal values of a discrete harmonic function and the data it extends."""

    values: np.ndarray
    data: dict
    dirichlet: tuple
    system: StiffnessSystem

    def residual(self):
        """Relative size of the interior equations ``(K u)_I``."""
        I, _ = self.system.factor(self.dirichlet)
        r = self.system.K @ self.values
        scale = max(float(np.abs(self.system.K).max() * np.abs(self.values).max()), 1e-300)
        return float(np.abs(r[I]).max() / scale) if len(I) else 0.0

    def trace(self, name):
        return self.values[self.system.mesh.loop(name)]


def harmonic_extension(system, boundary_data, dirichlet_loops=None):
    """Solve the Dirichlet problem with data on ``dirichlet_loops``.

    Loops of the subdomain listed in ``dirichlet_loops`` without data get
    zero data; loops not listed carry the natural (zero conormal) condition.
    """
    if dirichlet_loops is None:
        dirichlet_loops = tuple(system.loops)
    dirichlet_loops = tuple(sorted(set(dirichlet_loops)))
    for name in boundary_data:
        if name not in dirichlet_loops:
            raise DomainError(f"data given on {name!r} which is not a Dirichlet loop")
    u = np.zeros(system.mesh.n_nodes)
    for name in dirichlet_loops:
        nodes = system.loop_nodes(name)
        if name in boundary_data:
            f = np.asarray(boundary_data[name], dtype=float)
            if f.shape != nodes.shape:
                raise DimensionError(f"data on {name!r} has {f.size} values, loop has {nodes.size} nodes")
            u[nodes] = f
    I, lu = system.factor(dirichlet_loops)
    if len(I):
        rhs = -(system.K[I] @ u)
        u[I] = lu.solve(rhs)
    return HarmonicField(u, dict(boundary_data), dirichlet_loops, system)


@dataclass(frozen=True, eq=False)
class DNOperator:
    """Boundary operator stored as its weak form ``S`` (``u^T S v = Lambda(u)(v)``).

    The function-valued operator is ``M^{-1} S`` with the lumped boundary
    mass ``M``.
    """

    form_matrix: np.ndarray
    mass: np.ndarray
    nodes: np.ndarray
    tag: str
    loops: tuple = ()
    calculus: BoundaryCalculus | None = None

    @property
    def n(self):
        return len(self.nodes)

    @cached_property
    def matrix(self):
        return self.form_matrix / self.mass[:, None]

    def apply(self, u):
        return self.matrix @ u

    def form(self, u, v):
        return float(np.asarray(u) @ self.form_matrix @ np.asarray(v))

    def rayleigh(self, u):
        u = np.asarray(u, dtype=float)
        return self.form(u, u) / float(u @ (self.mass * u))

    def symmetry_defect(self):
        S = self.form_matrix
        return float(np.abs(S - S.T).max() / max(np.abs(S).max(), 1e-300))


def _dn_from(system, keep, grounded, tag):
    keep = tuple(keep)
    K_nodes = system.loop_nodes(keep)
    I, lu = system.factor(keep + tuple(grounded))
    K = system.K
    S = K[K_nodes][:, K_nodes].toarray()
    if len(I):
        KIb = K[I][:, K_nodes].toarray()
        S = S - KIb.T @ lu.solve(KIb)
    S = 0.5 * (S + S.T)
    mass = np.concatenate([system.calculus(nm).mass for nm in keep])
    calc = system.calculus(keep[0]) if len(keep) == 1 else None
    return DNOperator(S, mass, K_nodes, tag, keep, calc)


def dn_map(system, boundary_set=None, tag="Lambda"):
    """Full DN map of the system's domain, as a Schur complement on ``boundary_set``.

    Loops of the domain outside ``boundary_set`` carry the natural condition.
    """
    if boundary_set is None:
        boundary_set = tuple(system.loops)
    boundary_set = (boundary_set,) if isinstance(boundary_set, str) else tuple(boundary_set)
    if not boundary_set:
        raise DomainError("boundary_set must be nonempty")
    return _dn_from(system, boundary_set, (), tag)


def partial_dn(system, domain, data_loop, zero_loop=None, tag=None):
    """DN map of ``domain`` on ``data_loop`` with zero Dirichlet data on ``zero_loop``."""
    sub = system.subsystem(domain)
    grounded = () if zero_loop is None else (zero_loop,)
    for nm in (data_loop,) + grounded:
        if nm not in sub.loops:
            raise DomainError(f"{nm!r} is not on the boundary of subdomain {domain!r}")
    if tag is None:
        tag = f"Lambda[{domain}:{data_loop}]"
    return _dn_from(sub, (data_loop,), grounded, tag)


def conormal_trace(system, field, loop):
    """Residual conormal ``(K u)`` on the nodes of ``loop`` (a boundary form)."""
    nodes = system.loop_nodes(loop)
    return np.asarray(system.K[nodes] @ field.values).ravel()


def write_dn_csv(path, op):
    """Write the weak-form matrix row-major after a ``dn 1 n`` header."""
    with open(path, "w") as fh:
        fh.write(f"dn 1 {op.n}\n")
        for row in op.form_matrix:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_dn_csv(path):
    with open(path) as fh:
        head = fh.readline().split()
        if head[:2] != ["dn", "1"]:
            raise DimensionError(f"{path}: not a 'dn 1' file")
        n = int(head[2])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (n, n):
        raise DimensionError(f"{path}: expected {n}x{n} matrix")
    return data
