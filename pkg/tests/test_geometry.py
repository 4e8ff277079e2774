import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import euclid
from dnlab.errors import (ConfigurationError, GeometryError, MetricError, StructuralError, TransversalityError)
from dnlab.geometry import (IdentityProfile, MetricField, TentacleProfile, TriMesh, UniformShrink, anisotropic_perturbation,
                            attach_cylinder, build_annulus, build_disk, build_disk_with_inclusion, composite_metric,
                            nested_family, read_mesh, read_metric, refine, relative_contrast, write_mesh, write_metric)
from dnlab.geometry.mesh import INCLUSION
from dnlab.dn import assemble_stiffness, harmonic_extension


@pytest.mark.parametrize("res", [16, 32, 64])
def test_disk_euler_characteristic(res):
    assert build_disk(1.0, res).euler_characteristic == 1


def test_disk_outer_loop_has_resolution_nodes():
    m = build_disk(1.0, 48)
    assert len(m.loop("outer")) == 48
    assert np.allclose(np.linalg.norm(m.nodes[m.loop("outer")], axis=1), 1.0)


def test_annulus_has_two_loops(annulus64):
    assert set(annulus64.loops) == {"outer", "inner"}
    assert annulus64.euler_characteristic == 0


def test_disk_area_matches_polygon_and_converges():
    errs = []
    for n in (32, 64, 128):
        m = build_disk(1.0, n)
        poly = n * math.sin(2 * math.pi / n) / 2
        assert m.total_area == pytest.approx(poly, rel=0.02)
        errs.append(abs(m.total_area - math.pi) / math.pi)
    assert errs[1] <= 0.02
    assert errs[0] > errs[1] > errs[2]


def test_mesh_invariants(inclusion32):
    m = inclusion32
    m.check()
    counts = {}
    for t in m.triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            k = (min(a, b), max(a, b))
            counts[k] = counts.get(k, 0) + 1
    bset = {(min(a, b), max(a, b)) for a, b in m.boundary_edges}
    assert all((c == 1) == (e in bset) for e, c in counts.items())
    assert all(c in (1, 2) for c in counts.values())
    assert np.all(m.areas > 0)
    assert {"sigma", "sigma1"} <= set(m.interfaces)


def test_inclusion_touching_boundary_rejected():
    with pytest.raises(GeometryError, match="outer boundary"):
        build_disk_with_inclusion(1.0, (0.8, 0.0), 0.25, 32)


def test_low_resolution_rejected():
    with pytest.raises(ConfigurationError):
        build_disk(1.0, 8)


def test_inverted_triangle_rejected(disk32):
    bad = disk32.triangles.copy()
    bad[0] = bad[0][::-1]
    with pytest.raises(GeometryError):
        TriMesh(disk32.nodes, bad, disk32.regions, disk32.boundary_edges, disk32.edge_loops, disk32.loop_names)


def test_refine_quadruples_triangles(disk32):
    r = refine(disk32)
    assert r.n_triangles == 4 * disk32.n_triangles
    assert r.euler_characteristic == 1
    assert r.total_area == pytest.approx(disk32.total_area, rel=1e-12)


def test_mesh_io_roundtrip(tmp_path, inclusion32):
    p = tmp_path / "m.tmesh"
    write_mesh(p, inclusion32)
    m = read_mesh(p)
    assert np.array_equal(m.nodes, inclusion32.nodes)
    assert np.array_equal(m.triangles, inclusion32.triangles)
    assert np.array_equal(m.regions, inclusion32.regions)
    g = anisotropic_perturbation(inclusion32, euclid(inclusion32), np.diag([1.0, 0.0]), 0.3)
    q = tmp_path / "g.metric"
    write_metric(q, g)
    assert np.array_equal(read_metric(q).tensors, g.tensors)


# ----------------------------------------------------------------- metrics
def test_metric_rejects_non_spd():
    with pytest.raises(MetricError):
        MetricField(np.array([[[1.0, 2.0], [2.0, 1.0]]]))
    with pytest.raises(MetricError):
        MetricField(np.array([[[1.0, 0.5], [0.0, 1.0]]]))


def test_metric_bound_enforced():
    with pytest.raises(MetricError):
        MetricField(np.array([np.eye(2) * 10.0]), bound=4.0)


def test_composite_equal_metrics(inclusion32):
    g = euclid(inclusion32)
    c = composite_metric(g, g, inclusion32)
    assert c.contrast == 0
    assert np.array_equal(c.tensors, g.tensors)


def test_composite_conformal_contrast(inclusion32):
    g = euclid(inclusion32)
    c = composite_metric(g, MetricField(2 * g.tensors), inclusion32)
    assert c.contrast == pytest.approx(1.0)
    inc = inclusion32.regions == INCLUSION
    assert np.array_equal(c.tensors[~inc], g.tensors[~inc])
    assert np.array_equal(c.tensors[inc], 2 * g.tensors[inc])


@given(st.floats(0.01, 0.9))
def test_composite_anisotropic_contrast(inclusion32, c):
    g = euclid(inclusion32)
    h = MetricField(np.broadcast_to(np.diag([1 + c, 1.0]), g.tensors.shape).copy())
    assert composite_metric(g, h, inclusion32).contrast == pytest.approx(c, rel=1e-12)


@given(st.floats(0.1, 3.0), st.floats(-0.5, 0.5))
def test_relative_contrast_congruence_invariant(a, b):
    g = MetricField(np.array([[[2.0, 0.3], [0.3, 1.0]]]))
    h = MetricField(np.array([[[2.0 + a, 0.3 + b * 0], [0.3, 1.0 + a]]]))
    P = np.array([[1.0, b], [0.0, 1.0]])
    gp = MetricField(P.T @ g.tensors @ P)
    hp = MetricField(P.T @ h.tensors @ P)
    assert relative_contrast(g, h) == pytest.approx(relative_contrast(gp, hp), rel=1e-9)


# ---------------------------------------------------------------- families
def test_identity_profile_transversality(disk32):
    fam = nested_family(disk32, 1, IdentityProfile(), check=False)
    assert np.array_equal(fam.meshes[1].nodes, fam.meshes[0].nodes)
    with pytest.raises(TransversalityError):
        fam.eta(0)


def test_uniform_shrink_fields(disk32):
    fam = nested_family(disk32, 4, UniformShrink())
    for k in range(5):
        f = fam.fields(k)
        assert np.allclose(f["eta"], 0.5)
        assert np.allclose(f["a"], 0.0)
    np.testing.assert_allclose(fam.meshes[0].nodes, disk32.nodes)
    r = np.linalg.norm(fam.meshes[2].nodes[fam.loop], axis=1)
    assert np.allclose(r, 1 - fam.times[2] / 2)


def test_family_keeps_boundary_node_bijection(disk32):
    fam = nested_family(disk32, 3, UniformShrink())
    for m in fam.meshes:
        assert np.array_equal(m.loop("outer"), fam.loop)


def test_self_intersecting_morph_rejected(disk32):
    with pytest.raises(GeometryError):
        nested_family(disk32, 2, UniformShrink(rate=1.5), t_end=1.0)


def test_tentacle_reaches_target():
    incl_c, incl_r = (0.0, 0.35), 0.25
    prof = TentacleProfile(center=incl_c, target_radius=incl_r, target_angle=math.pi / 2, half_width=0.3,
                           ramp=0.3, base=0.15)
    mesh = build_disk(1.0, 128)
    fam = nested_family(mesh, 4, prof)
    end = fam.meshes[-1].nodes[fam.loop]
    x = prof.target_point
    r0 = 0.2
    # inclusion boundary arc inside B(x, r0)
    phi = np.linspace(0, 2 * np.pi, 4000)
    circ = np.column_stack([incl_c[0] + incl_r * np.cos(phi), incl_c[1] + incl_r * np.sin(phi)])
    arc = circ[np.linalg.norm(circ - x, axis=1) < r0]
    near = end[np.linalg.norm(end - x, axis=1) < r0]
    d1 = max(np.min(np.linalg.norm(arc[:, None] - near[None], axis=2), axis=1))
    d2 = max(np.min(np.linalg.norm(near[:, None] - arc[None], axis=2), axis=1))
    assert max(d1, d2) <= r0 / 4


# ---------------------------------------------------------------- cylinder
def test_attach_cylinder_zero_length(disk32):
    m, g = attach_cylinder(disk32, 0.0, 4)
    assert m is disk32


def test_attach_cylinder_node_count(disk32):
    m, g = attach_cylinder(disk32, 1.0, 5)
    assert m.n_nodes == disk32.n_nodes + 5 * 32
    assert m.euler_characteristic == 1
    assert g.n_triangles == m.n_triangles


def test_attach_cylinder_missing_loop(disk32):
    with pytest.raises(StructuralError):
        attach_cylinder(disk32, 1.0, 4, loop="inner")


def test_cylinder_harmonic_decay():
    # cos(theta) with zero data at the far end decays like sinh(L - t)/sinh(L) ~ e^{-t}
    base = build_disk(1.0, 64)
    L = 3.0
    m, g = attach_cylinder(base, L, 60)
    sys_ = assemble_stiffness(m, g)
    outer = m.loop("outer")
    th = np.arctan2(*m.nodes[outer][:, ::-1].T)
    U = harmonic_extension(sys_, {"outer": np.cos(th)}).values
    # rings of the strip at s = L k/60 (radius e^{s}); measure amplitude along theta = 0 ray
    ring_nodes = [base.loop("outer")] + [base.n_nodes + k * 64 + np.arange(64) for k in range(60)]
    s = np.array([0.0] + [L * (k + 1) / 60 for k in range(60)])
    amp = np.array([np.max(np.abs(U[r])) for r in ring_nodes])
    t_far = s[::-1]
    # amplitude measured from the outer loop inward: A(t) ~ e^{-t} for t << L
    mid = (t_far > 0.3) & (t_far < 1.5)
    slope = np.polyfit(t_far[mid], np.log(amp[mid]), 1)[0]
    assert slope == pytest.approx(-1.0, rel=0.1)
