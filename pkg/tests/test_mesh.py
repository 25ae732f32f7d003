import math

import numpy as np
import pytest

from euler_ss.errors import UsageError
from euler_ss.mesh import (Mesh, generate_annulus, load_mesh, save_mesh,
                           uniform_refine)


def test_annulus_counts():
    m = generate_annulus(1.0, 2.0, 2, 8)
    assert m.num_vertices == 24          # (nr+1) * ntheta
    assert m.num_triangles == 32         # 2 * nr * ntheta
    assert len(m.components) == 2
    assert m.euler_characteristic == 0


def test_annulus_roles_and_radii():
    m = generate_annulus(1.0, 2.0, 2, 8, roles=("outflow", "inflow"))
    assert m.component(0).role == "outflow"
    assert m.component(1).role == "inflow"
    assert m.radii == {0: 2.0, 1: 1.0}


def test_triangle_orientation_and_area():
    m = generate_annulus(1.0, 2.0, 4, 16)
    assert np.all(m.tri_area > 0)
    # inscribed polygons: area below pi (r1^2 - r0^2), converging from below
    exact = math.pi * 3.0
    assert m.tri_area.sum() < exact
    assert m.tri_area.sum() > 0.97 * exact


def test_boundary_loops_are_closed_chains():
    m = generate_annulus(1.0, 2.0, 3, 12)
    for c in m.components:
        a, b = c.edges[:, 0], c.edges[:, 1]
        assert np.array_equal(np.roll(a, -1), b)
        r = np.hypot(*m.vertices[c.nodes].T)
        np.testing.assert_allclose(r, m.radii[c.comp], atol=1e-12)


def test_boundary_orientation_fluid_left():
    # outer loop counterclockwise, inner loop clockwise; outward normals
    m = generate_annulus(1.0, 2.0, 2, 16)
    for c in m.components:
        mid, nrm = c.midpoint, c.normal
        sign = np.einsum("ed,ed->e", mid, nrm)
        if c.comp == 0:
            assert np.all(sign > 0)
        else:
            assert np.all(sign < 0)
        cross = (c.midpoint[:, 0] * c.tangent[:, 1]
                 - c.midpoint[:, 1] * c.tangent[:, 0])
        assert np.all(cross > 0) if c.comp == 0 else np.all(cross < 0)


def test_edge_table_consistency():
    m = generate_annulus(1.0, 2.0, 3, 12)
    nb = np.zeros(m.num_triangles)
    for e in range(len(m.edges)):
        nb[m.edge_left[e]] += 1
        if m.edge_right[e] >= 0:
            nb[m.edge_right[e]] += 1
    assert np.all(nb == 3)
    n_bdry = sum(len(c.edges) for c in m.components)
    assert (~m.interior_edge).sum() == n_bdry


def test_component_nodes_match_loops():
    m = generate_annulus(1.0, 2.0, 2, 8)
    assert set(m.component_nodes(0)) == set(m.component(0).nodes)
    assert len(m.boundary_nodes) == 16


def test_uniform_refine_counts_and_projection():
    m = generate_annulus(1.0, 2.0, 2, 8)
    r1 = uniform_refine(m)
    assert r1.num_triangles == 4 * m.num_triangles
    assert r1.num_vertices == m.num_vertices + len(m.edges)
    for c in r1.components:
        rad = np.hypot(*r1.vertices[c.nodes].T)
        np.testing.assert_allclose(rad, r1.radii[c.comp], atol=1e-12)
    # refinement tightens the polygonal area defect
    exact = math.pi * 3.0
    assert exact - r1.tri_area.sum() < 0.3 * (exact - m.tri_area.sum())


def test_refine_preserves_roles():
    m = generate_annulus(1.0, 2.0, 2, 8, roles=("wall", "inflow"))
    r = uniform_refine(m)
    assert [c.role for c in r.components] == ["wall", "inflow"]


def test_save_load_round_trip(tmp_path):
    m = generate_annulus(1.0, 2.0, 3, 8, roles=("outflow", "inflow"))
    path = tmp_path / "m.txt"
    save_mesh(m, path)
    back = load_mesh(path)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    assert [c.role for c in back.components] == \
        [c.role for c in m.components]
    # analytic radii are generator metadata, not part of the file format
    assert back.radii is None


def test_load_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.txt"
    m = generate_annulus(1.0, 2.0, 2, 8)
    save_mesh(m, path)
    lines = path.read_text().splitlines()
    lines[1] = "not-a-number 0.5"
    path.write_text("\n".join(lines))
    with pytest.raises(UsageError, match="line 2"):
        load_mesh(path)


def test_load_rejects_truncation(tmp_path):
    path = tmp_path / "short.txt"
    m = generate_annulus(1.0, 2.0, 2, 8)
    save_mesh(m, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:10]))
    with pytest.raises(UsageError):
        load_mesh(path)


def test_incircle_diameter_positive():
    m = generate_annulus(1.0, 2.0, 4, 16)
    assert np.all(m.incircle_diameter > 0)
    assert np.all(m.incircle_diameter < np.sqrt(m.tri_area.max()) * 2)
