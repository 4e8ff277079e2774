"""Piecewise-constant Riemannian metrics on triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import MetricError
from .mesh import INCLUSION


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MetricField:
    """One symmetric positive definite 2x2 tensor per triangle.

    Parameters
    ----------
    tensors : (nt, 2, 2) array
    bound : float, optional
        If given, every eigenvalue must lie in ``[1/bound, bound]``.
    contrast : float, optional
        ``sup |h - g|_g`` over the inclusion boundary, recorded by
        :func:`composite_metric`.
    """

    tensors: np.ndarray
    bound: float | None = None
    contrast: float | None = field(default=None, compare=False)

    def __post_init__(self):
        t = _frozen(self.tensors)
        if t.ndim != 3 or t.shape[1:] != (2, 2):
            raise MetricError("metric tensors must have shape (nt, 2, 2)")
        object.__setattr__(self, "tensors", t)
        if not np.all(np.isfinite(t)):
            raise MetricError("metric contains non-finite entries")
        asym = np.abs(t[:, 0, 1] - t[:, 1, 0])
        scale = np.abs(t).max(axis=(1, 2)) if len(t) else np.zeros(0)
        if np.any(asym > 1e-12 * np.maximum(scale, 1.0)):
            raise MetricError(f"metric tensor {int(np.argmax(asym))} is not symmetric")
        ev = self.eigenvalues
        if ev.size and ev[:, 0].min() <= 0:
            raise MetricError(f"metric tensor {int(np.argmin(ev[:, 0]))} is not positive definite")
        if self.bound is not None and ev.size:
            R = float(self.bound)
            if ev[:, 0].min() < 1.0 / R * (1 - 1e-12) or ev[:, 1].max() > R * (1 + 1e-12):
                raise MetricError(f"metric eigenvalues outside [1/{R}, {R}]")

    @classmethod
    def euclidean(cls, n_triangles):
        return cls(np.broadcast_to(np.eye(2), (n_triangles, 2, 2)))

    @classmethod
    def constant(cls, n_triangles, matrix):
        return cls(np.broadcast_to(np.asarray(matrix, dtype=float), (n_triangles, 2, 2)))

    @classmethod
    def scaled(cls, factors, base=None):
        """Conformal field ``c_T * base_T`` for per-triangle factors ``c``."""
        c = np.asarray(factors, dtype=float)
        b = base.tensors if base is not None else np.broadcast_to(np.eye(2), (len(c), 2, 2))
        return cls(c[:, None, None] * b)

    @property
    def n_triangles(self):
        return len(self.tensors)

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(self.tensors)

    @property
    def sqrt_det(self):
        t = self.tensors
        return np.sqrt(t[:, 0, 0] * t[:, 1, 1] - t[:, 0, 1] * t[:, 1, 0])

    @property
    def inverse(self):
        return np.linalg.inv(self.tensors)

    def __eq__(self, other):
        return isinstance(other, MetricField) and np.array_equal(self.tensors, other.tensors)

    __hash__ = object.__hash__


def relative_contrast(g, h, triangles=None):
    """``max |lambda_i(g^{-1} h) - 1|`` over the selected triangles."""
    gt, ht = g.tensors, h.tensors
    if triangles is not None:
        gt, ht = gt[triangles], ht[triangles]
    if len(gt) == 0:
        return 0.0
    # generalized eigenvalues via Cholesky of g
    L = np.linalg.cholesky(gt)
    Li = np.linalg.inv(L)
    sym = Li @ ht @ np.swapaxes(Li, 1, 2)
    ev = np.linalg.eigvalsh(0.5 * (sym + np.swapaxes(sym, 1, 2)))
    return float(np.max(np.abs(ev - 1.0)))


def _triangles_touching(mesh, loop_nodes, regions=(INCLUSION,)):
    on = np.zeros(mesh.n_nodes, dtype=bool)
    on[loop_nodes] = True
    return np.flatnonzero(on[mesh.triangles].any(axis=1) & np.isin(mesh.regions, list(regions)))


def composite_metric(g, h, mesh, regions=(INCLUSION,)):
    """The field ``g + chi_Sigma (h - g)``: ``h`` on inclusion triangles, ``g`` elsewhere.

    The returned field records ``contrast``, the largest
    ``|lambda_i(g^{-1} h) - 1|`` over inclusion triangles adjacent to the
    inclusion boundary.
    """
    for name, m in (("g", g), ("h", h)):
        if not isinstance(m, MetricField):
            raise MetricError(f"{name} must be a MetricField")
        if m.n_triangles != mesh.n_triangles:
            raise MetricError(f"{name} has {m.n_triangles} tensors, mesh has {mesh.n_triangles} triangles")
    mask = np.isin(mesh.regions, list(regions))
    out = np.array(g.tensors)
    out[mask] = h.tensors[mask]
    if set(regions) == {INCLUSION} and "sigma" in mesh.interfaces:
        adj = _triangles_touching(mesh, mesh.interfaces["sigma"], regions)
    else:
        adj = np.flatnonzero(mask)
    return MetricField(out, contrast=relative_contrast(g, h, adj))


def anisotropic_perturbation(mesh, base, direction, contrast, regions=(INCLUSION,)):
    """``base + contrast * direction`` on the inclusion, ``base`` elsewhere."""
    d = np.asarray(direction, dtype=float)
    if d.shape == (2, 2):
        d = np.broadcast_to(d, base.tensors.shape)
    h = MetricField(base.tensors + contrast * d)
    return composite_metric(base, h, mesh, regions)
