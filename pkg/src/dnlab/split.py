"""Operators of the splitting ``M = (M \\ Sigma_1) u Sigma_1``.

Loop names: ``outer`` is the boundary of ``M`` and ``sigma1`` the boundary
of the core ``Sigma_1``.  Superscripts follow the usual convention:
``Lambda^{1,0}`` has data on ``outer`` and zero on ``sigma1``,
``Lambda^{0,1}`` the reverse, both on ``M \\ Sigma_1``.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np

from .dn import assemble_stiffness, dn_map, partial_dn
from .errors import DomainError
from .geometry.metric import MetricField

OUTER, SIGMA1 = "outer", "sigma1"


class SplitOperators:
    """DN maps, extensions and boundary calculi of one metric on a split mesh."""

    def __init__(self, mesh, metric=None, outer=OUTER):
        if SIGMA1 not in mesh.interfaces:
            raise DomainError("mesh has no core interface 'sigma1'")
        self.mesh = mesh
        self.metric = metric if metric is not None else MetricField.euclidean(mesh.n_triangles)
        self.outer = outer
        self.full = assemble_stiffness(mesh, self.metric)
        self.ext = self.full.subsystem("exterior")
        self.core = self.full.subsystem("core")

    @property
    def outer_nodes(self):
        return self.mesh.loop(self.outer)

    @property
    def sigma_nodes(self):
        return self.mesh.loop(SIGMA1)

    @cached_property
    def calc_outer(self):
        return self.full.calculus(self.outer)

    @cached_property
    def calc_sigma(self):
        return self.full.calculus(SIGMA1)

    @cached_property
    def Lambda(self):
        """Full DN map of ``M`` on ``outer`` (other boundary loops are Dirichlet-free)."""
        return dn_map(self.full, (self.outer,), tag="Lambda")

    @cached_property
    def Lambda01(self):
        return partial_dn(self.full, "exterior", SIGMA1, self.outer, tag="Lambda01")

    @cached_property
    def Lambda10(self):
        return partial_dn(self.full, "exterior", self.outer, SIGMA1, tag="Lambda10")

    @cached_property
    def LambdaSigma(self):
        return partial_dn(self.full, "core", SIGMA1, None, tag="LambdaSigma1")

    @cached_property
    def coupling(self):
        """Off-diagonal block ``C`` (sigma1 rows, outer columns) of the exterior Schur complement."""
        ext = dn_map(self.ext, (self.outer, SIGMA1), tag="Lambda_ext")
        n = len(self.outer_nodes)
        return ext.form_matrix[n:, :n]

    @cached_property
    def restriction(self):
        """``T u = E(u)|_{sigma1}`` computed from the full-domain extension."""
        return self.full.extension_matrix((self.outer,), (self.outer,), self.sigma_nodes)

    def transmission_matrix(self):
        """``P = S^{0,1} + S_{Sigma_1}`` (weak forms on sigma1)."""
        return self.Lambda01.form_matrix + self.LambdaSigma.form_matrix

    def extend(self, u):
        """Full harmonic extension of data on the outer loop (nodal values)."""
        I, lu = self.full.factor((self.outer,))
        U = np.zeros(self.mesh.n_nodes)
        U[self.outer_nodes] = u
        U[I] = lu.solve(-(self.full.K[I] @ U))
        return U
