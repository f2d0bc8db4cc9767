import math

import numpy as np
import pytest

from capserrin.geometry import CapSpec, DomainSpec, SigmaCurve, enclosed_volume, make_cap_domain, make_half_disk
from capserrin.mesh import (
    MeshError,
    Tag,
    TriMesh,
    check_mesh,
    mesh_quality,
    read_native,
    read_vtk_points,
    refine,
    triangle_angles,
    triangulate,
    write_native,
    write_vtk,
)


@pytest.fixture(scope="module")
def half_disk_mesh():
    return triangulate(make_half_disk(0.05), 0.1)


@pytest.fixture(scope="module")
def cap_mesh():
    return triangulate(make_cap_domain(CapSpec(math.pi / 2, 0.25), 0.01), 0.05)


def test_half_disk_invariants(half_disk_mesh):
    m = half_disk_mesh
    check_mesh(m)
    q = mesh_quality(m)
    assert q.min_angle >= 20.0
    on_t = np.isin(m.vertex_tags, [Tag.T_ARC, Tag.GAMMA])
    assert np.max(np.abs(np.linalg.norm(m.vertices[on_t], axis=1) - 1.0)) <= 1e-10
    assert np.all(m.signed_areas() > 0)


def test_boundary_spacing_bounded(cap_mesh):
    m = cap_mesh
    e = m.boundary_edges
    lengths = np.linalg.norm(m.vertices[e[:, 1]] - m.vertices[e[:, 0]], axis=1)
    assert lengths.max() <= 0.05 + 1e-12


def test_cap_gamma_vertices_exact(cap_mesh):
    spec = CapSpec(math.pi / 2, 0.25)
    g = cap_mesh.vertices[cap_mesh.gamma_vertices()]
    expected = np.array([[math.cos(a), math.sin(a)] for a in spec.gamma_angles])
    d = np.linalg.norm(g[:, None, :] - expected[None], axis=2)
    assert np.all(d.min(axis=1) <= 1e-14)
    # Each GAMMA vertex touches exactly one SIGMA and one T_ARC edge.
    for v in cap_mesh.gamma_vertices():
        touching = cap_mesh.edge_tags[(cap_mesh.boundary_edges == v).any(axis=1)]
        assert sorted(touching.tolist()) == [Tag.SIGMA, Tag.T_ARC]


def test_sigma_vertices_on_circle(cap_mesh):
    spec = CapSpec(math.pi / 2, 0.25)
    sig = cap_mesh.vertex_tags == Tag.SIGMA
    r = np.linalg.norm(cap_mesh.vertices[sig] - spec.center, axis=1)
    assert np.max(np.abs(r - spec.radius)) <= 1e-10


def test_h_too_large():
    with pytest.raises(MeshError, match="h must lie"):
        triangulate(make_half_disk(0.05), 10.0)


def test_vertex_count_scales_with_area():
    d = make_cap_domain(CapSpec(math.pi / 2, 0.25), 0.005)
    counts = [triangulate(d, h).n_vertices for h in (0.04, 0.02)]
    assert 3.0 <= counts[1] / counts[0] <= 5.0


def test_refine_red(half_disk_mesh):
    m = half_disk_mesh
    r = refine(m)
    assert r.n_triangles == 4 * m.n_triangles
    np.testing.assert_array_equal(r.vertices[: m.n_vertices], m.vertices)
    assert mesh_quality(r).h_max == pytest.approx(mesh_quality(m).h_max / 2, rel=0.1)


def test_refine_twice_keeps_circle():
    m = triangulate(make_half_disk(0.1), 0.2)
    r = refine(refine(m))
    on_t = np.isin(r.vertex_tags, [Tag.T_ARC, Tag.GAMMA])
    assert np.max(np.abs(np.linalg.norm(r.vertices[on_t], axis=1) - 1.0)) <= 1e-10
    check_mesh(r, min_angle=None)


def test_refine_thin_cap_succeeds():
    m = triangulate(make_cap_domain(CapSpec(math.pi / 2, 0.02), 0.005), 0.015)
    r = refine(refine(m))
    check_mesh(r, min_angle=20.0)


def test_refine_reports_inverting_snap():
    # Σ is a circle bulging into the domain; a sliver hugging the chord is
    # inverted by moving the edge midpoint back onto the circle.
    q, R = np.array([0.0, -1.0]), math.sqrt(2.0)
    a, b = q + R * np.array([math.cos(1.2), math.sin(1.2)]), q + R * np.array([math.cos(1.3), math.sin(1.3)])
    mid = 0.5 * (a + b)
    inward = (mid - q) / np.linalg.norm(mid - q)
    c = mid + 1e-4 * inward
    v = np.array([b, a, c])
    sigma = np.array([[-1.0, 0.0], [0.0, R - 1.0], [1.0, 0.0]])
    dom = DomainSpec(sigma, (0.0, math.pi), SigmaCurve("circle", tuple(q), R))
    m = TriMesh(v, np.array([[0, 1, 2]]), np.array([Tag.SIGMA, Tag.SIGMA, Tag.INTERIOR]),
                np.array([[0, 1]]), np.array([Tag.SIGMA]), dom)
    assert m.signed_areas()[0] > 0
    with pytest.raises(MeshError, match="triangle 0"):
        refine(m)


def test_quality_of_equilateral():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    m = TriMesh(v, np.array([[0, 1, 2]]), np.zeros(3, dtype=int), np.zeros((0, 2), dtype=int),
                np.zeros(0, dtype=int))
    q = mesh_quality(m)
    assert q.min_angle == pytest.approx(60.0)
    assert q.max_aspect == pytest.approx(1.0)
    assert np.degrees(triangle_angles(v, m.triangles)).sum() == pytest.approx(180.0)


def test_area_converges_to_enclosed_volume():
    d = make_cap_domain(CapSpec(math.pi / 3, 0.15), 0.002)
    vol = enclosed_volume(d)
    m = triangulate(d, 0.06)
    hs, errs = [], []
    for _ in range(3):
        m = refine(m)
        hs.append(mesh_quality(m).h_max)
        errs.append(abs(m.area() - vol))
    # Nested refinement: h halves exactly, so use the nominal ratio 2.
    orders = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    assert min(orders) >= 1.9


def test_native_round_trip(tmp_path, cap_mesh):
    path = tmp_path / "m.txt"
    write_native(cap_mesh, path)
    assert path.read_text().splitlines()[0] == "capserrin-mesh v1"
    back = read_native(path, cap_mesh.domain)
    np.testing.assert_array_equal(back.vertices, cap_mesh.vertices)
    np.testing.assert_array_equal(back.triangles, cap_mesh.triangles)
    np.testing.assert_array_equal(back.vertex_tags, cap_mesh.vertex_tags)
    np.testing.assert_array_equal(back.boundary_edges, cap_mesh.boundary_edges)
    check_mesh(back)
    bad = tmp_path / "bad.txt"
    bad.write_text("something else\n")
    with pytest.raises(MeshError):
        read_native(bad)


def test_vtk_round_trip(tmp_path, cap_mesh):
    path = tmp_path / "m.vtk"
    f = cap_mesh.vertices[:, 0] ** 2
    write_vtk(cap_mesh, path, {"f": f})
    pts, cells, fields = read_vtk_points(path)
    np.testing.assert_array_equal(pts, cap_mesh.vertices)
    np.testing.assert_array_equal(cells, cap_mesh.triangles)
    np.testing.assert_array_equal(fields["f"], f)
    np.testing.assert_array_equal(fields["tag"], cap_mesh.vertex_tags)
    with pytest.raises(ValueError):
        write_vtk(cap_mesh, path, {"g": np.zeros(3)})


def test_chains(cap_mesh):
    sig, t = cap_mesh.sigma_chain(), cap_mesh.t_chain()
    assert sig[-1] == t[0] and sig[0] == t[-1]
    ang = np.arctan2(cap_mesh.vertices[t, 1], cap_mesh.vertices[t, 0])
    assert np.all(np.diff(ang) > 0)


def test_meshes_are_immutable(cap_mesh):
    with pytest.raises(ValueError):
        cap_mesh.vertices[0, 0] = 5.0
