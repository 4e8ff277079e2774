"""Meshes, metrics and nested families."""

from .family import (ExponentialShrink, IdentityProfile, NestedFamily, TentacleProfile, UniformShrink,
                     WavyShrink, boundary_fields, nested_family)
from .io import read_mesh, read_metric, write_mesh, write_metric
from .mesh import (ANNULUS, EXTERIOR, INCLUSION, TriMesh, attach_cylinder, build_annulus, build_disk,
                   build_disk_with_inclusion, refine)
from .metric import MetricField, anisotropic_perturbation, composite_metric, relative_contrast

__all__ = [
    "ANNULUS", "EXTERIOR", "INCLUSION", "TriMesh", "MetricField", "NestedFamily",
    "ExponentialShrink", "IdentityProfile", "TentacleProfile", "UniformShrink", "WavyShrink",
    "attach_cylinder", "boundary_fields", "build_annulus", "build_disk", "build_disk_with_inclusion",
    "composite_metric", "anisotropic_perturbation", "nested_family", "read_mesh", "read_metric",
    "refine", "relative_contrast", "write_mesh", "write_metric",
]
