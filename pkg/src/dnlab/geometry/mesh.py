"""Triangulated 2-manifolds with boundary.

Meshes are built from concentric rings of nodes so that every circle the
experiments care about (the outer boundary, the boundary of the core
``Sigma_1`` and the boundary of the inclusion ``Sigma``) is a closed chain of
mesh edges.  Region tags then represent characteristic functions exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..errors import ConfigurationError, GeometryError, StructuralError

EXTERIOR, ANNULUS, INCLUSION = 0, 1, 2
REGION_NAMES = ("exterior", "annulus", "inclusion")
CORE = frozenset({ANNULUS, INCLUSION})

_AREA_TOL = 1e-14


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def signed_areas(nodes, triangles):
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _polygon_area(points):
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _chain(directed_edges):
    """Split directed boundary edges into closed cycles of node indices."""
    succ = {}
    for a, b in directed_edges:
        a, b = int(a), int(b)
        if a in succ:
            raise StructuralError(f"node {a} starts two boundary edges (non-manifold boundary)")
        succ[a] = b
    cycles = []
    remaining = set(succ)
    while remaining:
        start = min(remaining)
        cyc = [start]
        remaining.discard(start)
        nxt = succ[start]
        while nxt != start:
            if nxt not in remaining:
                raise StructuralError("boundary edges do not form closed cycles")
            cyc.append(nxt)
            remaining.discard(nxt)
            nxt = succ[nxt]
        cycles.append(np.array(cyc, dtype=np.int64))
    return cycles


def _canonical_loop(nodes, cyc):
    """Orient a cycle counter-clockwise and start it at its smallest node index.

    The start depends only on combinatorics, so morphed copies of a mesh
    keep identical loop orders.
    """
    if _polygon_area(nodes[cyc]) < 0:
        cyc = cyc[::-1]
    return np.roll(cyc, -int(np.argmin(cyc)))


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangulated surface with tagged regions and boundary loops.

    Parameters
    ----------
    nodes : (nv, 2) array
        Node coordinates.
    triangles : (nt, 3) int array
        Counter-clockwise node triples.
    regions : (nt,) int array
        One of ``EXTERIOR``, ``ANNULUS``, ``INCLUSION`` per triangle.
    boundary_edges : (nb, 2) int array
        Undirected boundary edges.
    edge_loops : (nb,) int array
        Loop index of each boundary edge, into ``loop_names``.
    loop_names : tuple of str
    """

    nodes: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    boundary_edges: np.ndarray
    edge_loops: np.ndarray
    loop_names: tuple = ("outer",)
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, float))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        object.__setattr__(self, "regions", _frozen(self.regions, np.int64))
        object.__setattr__(self, "boundary_edges", _frozen(np.reshape(self.boundary_edges, (-1, 2)), np.int64))
        object.__setattr__(self, "edge_loops", _frozen(self.edge_loops, np.int64))
        object.__setattr__(self, "loop_names", tuple(self.loop_names))
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise GeometryError("nodes must have shape (nv, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise GeometryError("triangles must have shape (nt, 3)")
        if len(self.regions) != len(self.triangles):
            raise GeometryError("one region tag per triangle required")
        if len(self.edge_loops) != len(self.boundary_edges):
            raise GeometryError("one loop tag per boundary edge required")
        if self.validate:
            self.check()

    # ------------------------------------------------------------------ checks
    def check(self):
        """Raise if any structural invariant of the mesh is violated."""
        nv = len(self.nodes)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise GeometryError("triangle references a missing node")
        if np.any(np.isin(self.regions, (EXTERIOR, ANNULUS, INCLUSION), invert=True)):
            raise GeometryError("unknown region tag")
        areas = self.areas
        if np.any(areas <= _AREA_TOL * max(1.0, float(np.abs(areas).max()))):
            bad = int(np.argmin(areas))
            raise GeometryError(f"triangle {bad} is degenerate or clockwise (signed area {areas[bad]:.3e})")
        counts = self._edge_counts
        if np.any(counts > 2):
            raise StructuralError("an edge is shared by more than two triangles")
        free = {tuple(e) for e, c in zip(self.edges, counts) if c == 1}
        given = {tuple(sorted(map(int, e))) for e in self.boundary_edges}
        if free != given:
            raise StructuralError("boundary_edges do not match the edges owned by a single triangle")
        if self.edge_loops.size and (self.edge_loops.min() < 0 or self.edge_loops.max() >= len(self.loop_names)):
            raise StructuralError("edge loop tag outside loop_names")
        _ = self.loops

    # -------------------------------------------------------------- properties
    @cached_property
    def areas(self):
        return signed_areas(self.nodes, self.triangles)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        edges, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        return edges, inverse.reshape(3, -1).T, counts

    @property
    def edges(self):
        return self._edge_data[0]

    @property
    def _edge_counts(self):
        return self._edge_data[2]

    @cached_property
    def edge_triangles(self):
        """Map from a sorted edge tuple to the triangles that contain it."""
        out = {}
        tri_edges = self._edge_data[1]
        edges = self.edges
        for ti in range(len(self.triangles)):
            for ei in tri_edges[ti]:
                out.setdefault((int(edges[ei, 0]), int(edges[ei, 1])), []).append(ti)
        return out

    @cached_property
    def _directed_edge_owner(self):
        t = self.triangles
        owner = {}
        for ti, (a, b, c) in enumerate(t):
            owner[(int(a), int(b))] = ti
            owner[(int(b), int(c))] = ti
            owner[(int(c), int(a))] = ti
        return owner

    @cached_property
    def loops(self):
        """Cyclic counter-clockwise node order of every boundary loop, by name."""
        owner = self._directed_edge_owner
        out = {}
        for li, name in enumerate(self.loop_names):
            directed = []
            for a, b in self.boundary_edges[self.edge_loops == li]:
                a, b = int(a), int(b)
                directed.append((a, b) if (a, b) in owner else (b, a))
            if not directed:
                raise StructuralError(f"loop {name!r} has no edges")
            cycles = _chain(directed)
            if len(cycles) != 1:
                raise StructuralError(f"loop {name!r} is not a single closed cycle")
            out[name] = _canonical_loop(self.nodes, cycles[0])
        return out

    def region_boundary(self, regions):
        """Closed boundary loops of the union of triangles tagged with ``regions``."""
        mask = np.isin(self.regions, list(regions))
        return self._mask_boundary(mask)

    def _mask_boundary(self, mask):
        t = self.triangles[mask]
        directed = set()
        for a, b, c in t:
            directed.update(((int(a), int(b)), (int(b), int(c)), (int(c), int(a))))
        free = [(a, b) for (a, b) in directed if (b, a) not in directed]
        return [_canonical_loop(self.nodes, c) for c in _chain(sorted(free))]

    @cached_property
    def interfaces(self):
        """Interior region boundaries: ``sigma1`` (core) and ``sigma`` (inclusion)."""
        out = {}
        boundary_nodes = set(self.boundary_edges.ravel().tolist())
        for name, regs in (("sigma1", CORE), ("sigma", (INCLUSION,))):
            if not np.any(np.isin(self.regions, list(regs))) or np.all(np.isin(self.regions, list(regs))):
                continue
            loops = self.region_boundary(regs)
            loops = [lp for lp in loops if not boundary_nodes.intersection(lp.tolist())]
            if len(loops) == 1:
                out[name] = loops[0]
        return out

    def loop(self, name):
        """Node order of a boundary loop or an interface, by name."""
        if name in self.loops:
            return self.loops[name]
        if name in self.interfaces:
            return self.interfaces[name]
        raise KeyError(f"mesh has no loop or interface named {name!r}")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def euler_characteristic(self):
        return self.n_nodes - len(self.edges) + self.n_triangles

    @property
    def max_edge_length(self):
        e = self.edges
        return float(np.max(np.linalg.norm(self.nodes[e[:, 1]] - self.nodes[e[:, 0]], axis=1)))

    @property
    def total_area(self):
        return float(self.areas.sum())

    def with_nodes(self, nodes):
        """Same combinatorics and tags, moved nodes (validated)."""
        return TriMesh(nodes, self.triangles, self.regions, self.boundary_edges, self.edge_loops, self.loop_names)


# ------------------------------------------------------------------ builders
def _ring_counts(radii, h, outer_count):
    counts = []
    for r in radii:
        if r == 0.0:
            counts.append(1)
        else:
            counts.append(max(6, int(round(2 * np.pi * r / h))))
    counts[-1] = outer_count
    for i in range(len(counts) - 2, -1, -1):
        if counts[i] > counts[i + 1]:
            counts[i] = counts[i + 1]
    return counts


def _segment_radii(breaks, h):
    radial = h * math.sqrt(3) / 2
    radii = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        m = max(1, int(round((b - a) / radial)))
        radii.extend(a + (b - a) * np.arange(1, m + 1) / m)
    return np.array(radii)


def _strip(inner, inner_ang, outer, outer_ang):
    """Triangulate between two closed rings by merging their angle sequences."""
    na, nb = len(inner), len(outer)
    tris = []
    i = j = 0
    while i < na or j < nb:
        advance_inner = j == nb or (i < na and inner_ang[i + 1] <= outer_ang[j + 1])
        if advance_inner:
            tris.append((inner[i % na], outer[j % nb], inner[(i + 1) % na]))
            i += 1
        else:
            tris.append((inner[i % na], outer[j % nb], outer[(j + 1) % nb]))
            j += 1
    return tris


def _ring_mesh(radii, counts):
    nodes, rings, angles = [], [], []
    for r, n in zip(radii, counts):
        start = len(nodes)
        if r == 0.0:
            nodes.append((0.0, 0.0))
            rings.append(np.array([start]))
            angles.append(None)
            continue
        th = 2 * np.pi * np.arange(n) / n
        nodes.extend(zip(r * np.cos(th), r * np.sin(th)))
        rings.append(np.arange(start, start + n))
        angles.append(np.append(th, 2 * np.pi))
    tris, tri_radius = [], []
    for k in range(len(radii) - 1):
        mid = 0.5 * (radii[k] + radii[k + 1])
        if angles[k] is None:
            ring = rings[k + 1]
            new = [(rings[k][0], ring[i], ring[(i + 1) % len(ring)]) for i in range(len(ring))]
        else:
            new = _strip(rings[k], angles[k], rings[k + 1], angles[k + 1])
        tris.extend(new)
        tri_radius.extend([mid] * len(new))
    return np.array(nodes), np.array(tris, dtype=np.int64), np.array(tri_radius), rings


def _loop_edges(ring):
    return np.column_stack([ring, np.roll(ring, -1)])


def _tag_regions(tri_radius, inclusion_radius, sigma1_radius):
    regions = np.full(len(tri_radius), EXTERIOR)
    if sigma1_radius:
        regions[tri_radius < sigma1_radius] = ANNULUS
    if inclusion_radius:
        regions[tri_radius < inclusion_radius] = INCLUSION
    return regions


def build_disk(radius=1.0, resolution=64, sigma1_radius=None):
    """Disk mesh with ``resolution`` boundary nodes and an optional core circle."""
    return build_disk_with_inclusion(radius, (0.0, 0.0), 0.0, resolution, sigma1_radius=sigma1_radius)


def build_disk_with_inclusion(outer_radius=1.0, inclusion_center=(0.0, 0.0), inclusion_radius=0.25,
                              resolution=64, sigma1_radius=None):
    """Disk ``M`` containing a core disk ``Sigma_1`` and an inclusion ``Sigma``.

    The core is centred at the origin; the inclusion is a ball of radius
    ``inclusion_radius`` around ``inclusion_center`` inside the core.  Both
    circles are chains of mesh edges.  With ``inclusion_radius == 0`` the
    result is a plain disk (with a core only if ``sigma1_radius`` is given).

    Raises
    ------
    GeometryError
        If the inclusion is not compactly contained in the disk or the core.
    """
    R = float(outer_radius)
    rho = float(inclusion_radius or 0.0)
    c = np.asarray(inclusion_center, dtype=float)
    dc = float(np.linalg.norm(c))
    if resolution < 16:
        raise ConfigurationError("resolution must be at least 16 boundary nodes")
    if R <= 0 or rho < 0:
        raise GeometryError("radii must be positive")
    if rho > 0 and dc + rho >= R:
        raise GeometryError(
            f"inclusion B({tuple(c)}, {rho}) touches or crosses the outer boundary |x| = {R}; "
            "it must be compactly contained in the disk")
    if rho > 0 and sigma1_radius is None:
        sigma1_radius = 0.5 * (dc + rho + R)
    r1 = float(sigma1_radius) if sigma1_radius else None
    if r1 is not None and not 0 < r1 < R:
        raise GeometryError("core radius must lie strictly inside the disk")
    if rho > 0 and dc + rho >= r1:
        raise GeometryError("inclusion must be compactly contained in the core Sigma_1")

    h = 2 * np.pi * R / resolution
    breaks = sorted({0.0, R, *(x for x in (rho, r1) if x)})
    radii = _segment_radii(breaks, h)
    counts = _ring_counts(radii, h, resolution)
    nodes, tris, tri_r, rings = _ring_mesh(radii, counts)
    regions = _tag_regions(tri_r, rho, r1)

    if rho > 0 and dc > 0:
        # rigid translation of the inclusion, blended out before the core circle
        width = r1 - rho
        if dc * 1.5 / width >= 0.95:
            raise GeometryError("inclusion centre too far from the core centre for an injective blend")
        r = np.linalg.norm(nodes, axis=1)
        z = np.clip((r1 - r) / width, 0.0, 1.0)
        beta = z * z * (3 - 2 * z)
        nodes = nodes + beta[:, None] * c[None, :]

    outer = rings[-1]
    return TriMesh(nodes, tris, regions, _loop_edges(outer), np.zeros(len(outer)), ("outer",))


def build_annulus(inner_radius=0.5, outer_radius=1.0, resolution=64, sigma1_radius=None):
    """Annulus with loops ``outer`` and ``inner`` and an optional middle circle."""
    r0, R = float(inner_radius), float(outer_radius)
    if not 0 < r0 < R:
        raise GeometryError("need 0 < inner_radius < outer_radius")
    if resolution < 16:
        raise ConfigurationError("resolution must be at least 16 boundary nodes")
    h = 2 * np.pi * R / resolution
    breaks = sorted({r0, R, *((sigma1_radius,) if sigma1_radius else ())})
    radii = _segment_radii(breaks, h)
    counts = _ring_counts(radii, h, resolution)
    nodes, tris, tri_r, rings = _ring_mesh(radii, counts)
    regions = np.full(len(tris), EXTERIOR)
    if sigma1_radius:
        regions[tri_r < sigma1_radius] = ANNULUS
    outer, inner = rings[-1], rings[0]
    edges = np.vstack([_loop_edges(outer), _loop_edges(inner)])
    loops = np.concatenate([np.zeros(len(outer)), np.ones(len(inner))])
    return TriMesh(nodes, tris, regions, edges, loops, ("outer", "inner"))


def refine(mesh):
    """Red refinement: split every triangle into four through edge midpoints.

    Region tags, loop tags and orientation are inherited; new boundary
    midpoints stay on the polygonal boundary.
    """
    edges = mesh.edges
    nv = mesh.n_nodes
    mid_index = {(int(a), int(b)): nv + k for k, (a, b) in enumerate(edges)}
    nodes = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])])

    def m(a, b):
        return mid_index[(a, b) if a < b else (b, a)]

    tris, regs = [], []
    for (a, b, c), reg in zip(mesh.triangles.tolist(), mesh.regions.tolist()):
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        tris.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
        regs.extend([reg] * 4)
    bedges, bloops = [], []
    for (a, b), lp in zip(mesh.boundary_edges.tolist(), mesh.edge_loops.tolist()):
        mm = m(a, b)
        bedges.extend([(a, mm), (mm, b)])
        bloops.extend([lp, lp])
    return TriMesh(nodes, tris, regs, bedges, bloops, mesh.loop_names)


def attach_cylinder(mesh, length, layers, metric=None, loop="outer"):
    """Glue a truncated product cylinder ``[0, length] x loop`` outside ``loop``.

    The strip is embedded by radial scaling about the loop's centroid, so it is
    conformal to the flat product cylinder; the returned metric field carries
    the product metric on the strip (and ``metric`` or Euclidean elsewhere).

    Returns
    -------
    (TriMesh, MetricField)
    """
    from .metric import MetricField

    base = metric if metric is not None else MetricField.euclidean(mesh.n_triangles)
    if length == 0:
        return mesh, base
    if length < 0:
        raise ConfigurationError("cylinder length must be non-negative")
    if layers < 2:
        raise ConfigurationError("a cylinder needs at least two layers")
    if loop not in mesh.loops:
        raise StructuralError(f"mesh has no boundary loop {loop!r} to glue along")
    ring = mesh.loops[loop]
    pts = mesh.nodes[ring]
    centre = pts.mean(axis=0)
    rad = np.linalg.norm(pts - centre, axis=1)
    scale_len = float(np.mean(rad))
    steps = float(length) / scale_len * np.arange(1, layers + 1) / layers
    n = len(ring)
    nodes = [mesh.nodes]
    rings = [ring]
    for k, s in enumerate(steps):
        nodes.append(centre + (pts - centre) * math.exp(s))
        rings.append(mesh.n_nodes + k * n + np.arange(n))
    nodes = np.vstack(nodes)
    new_tris, tri_scale = [], []
    for k in range(layers):
        a, b = rings[k], rings[k + 1]
        smid = 0.5 * ((steps[k - 1] if k else 0.0) + steps[k])
        for i in range(n):
            i1 = (i + 1) % n
            new_tris.append((a[i], b[i], b[i1]))
            new_tris.append((a[i], b[i1], a[i1]))
            tri_scale.extend([smid, smid])
    tris = np.vstack([mesh.triangles, np.array(new_tris)])
    regions = np.concatenate([mesh.regions, np.full(len(new_tris), EXTERIOR)])
    lid = mesh.loop_names.index(loop)
    keep = mesh.edge_loops != lid
    edges = np.vstack([mesh.boundary_edges[keep], _loop_edges(rings[-1])])
    loops = np.concatenate([mesh.edge_loops[keep], np.full(n, lid)])
    try:
        out = TriMesh(nodes, tris, regions, edges, loops, mesh.loop_names)
    except GeometryError as exc:
        raise StructuralError(f"cylinder gluing failed: {exc}") from exc
    # product metric dt^2 + ds^2 pulled back through y = c + e^s (x - c)
    factor = np.exp(-2 * np.array(tri_scale))
    cyl = factor[:, None, None] * np.eye(2)[None]
    tensors = np.concatenate([base.tensors, cyl])
    return out, MetricField(tensors)
