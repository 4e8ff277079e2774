"""Plain-text mesh and metric files."""

from __future__ import annotations

import numpy as np

from ..errors import GeometryError
from .mesh import TriMesh
from .metric import MetricField


def write_mesh(path, mesh):
    nv, nt, nb = mesh.n_nodes, mesh.n_triangles, len(mesh.boundary_edges)
    with open(path, "w") as fh:
        fh.write("tmesh 1\n")
        fh.write(f"{nv} {nt} {nb}\n")
        for x, y in mesh.nodes.tolist():
            fh.write(f"{x!r} {y!r}\n")
        for (i, j, k), r in zip(mesh.triangles.tolist(), mesh.regions.tolist()):
            fh.write(f"{i} {j} {k} {r}\n")
        for (i, j), lp in zip(mesh.boundary_edges.tolist(), mesh.edge_loops.tolist()):
            fh.write(f"{i} {j} {lp}\n")


def read_mesh(path, loop_names=None):
    """Read a ``tmesh 1`` file.  Loop names default to ``outer``, ``inner``, ``loop2``, ..."""
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or lines[0] != ["tmesh", "1"]:
        raise GeometryError(f"{path}: not a 'tmesh 1' file")
    try:
        nv, nt, nb = map(int, lines[1])
        body = lines[2:]
        if len(body) != nv + nt + nb:
            raise GeometryError(f"{path}: expected {nv + nt + nb} records, found {len(body)}")
        nodes = np.array(body[:nv], dtype=float)
        tri = np.array(body[nv:nv + nt], dtype=np.int64)
        bnd = np.array(body[nv + nt:], dtype=np.int64).reshape(-1, 3)
    except ValueError as exc:
        raise GeometryError(f"{path}: malformed record ({exc})") from exc
    n_loops = int(bnd[:, 2].max()) + 1 if len(bnd) else 0
    if loop_names is None:
        loop_names = tuple((["outer", "inner"] + [f"loop{i}" for i in range(2, n_loops)])[:n_loops])
    return TriMesh(nodes.reshape(-1, 2), tri[:, :3], tri[:, 3], bnd[:, :2], bnd[:, 2], loop_names)


def write_metric(path, metric):
    with open(path, "w") as fh:
        fh.write("metric 1\n")
        for g in metric.tensors.tolist():
            fh.write(f"{g[0][0]!r} {g[0][1]!r} {g[1][1]!r}\n")


def read_metric(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or lines[0] != ["metric", "1"]:
        raise GeometryError(f"{path}: not a 'metric 1' file")
    a = np.array(lines[1:], dtype=float).reshape(-1, 3)
    t = np.empty((len(a), 2, 2))
    t[:, 0, 0], t[:, 0, 1], t[:, 1, 0], t[:, 1, 1] = a[:, 0], a[:, 1], a[:, 1], a[:, 2]
    return MetricField(t)
