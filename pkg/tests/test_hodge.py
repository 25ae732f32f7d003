import math

import numpy as np
import pytest

from euler_ss import fem
from euler_ss.errors import PreconditionError, UsageError
from euler_ss.hodge import (HarmonicBasis, biot_savart, check_elliptic_growth,
                            compute_dual_basis, greens_operator,
                            reconstruct_velocity, validate_sign_condition)
from euler_ss.mesh import generate_annulus

LN2 = math.log(2.0)


@pytest.fixture(scope="module")
def fine():
    return generate_annulus(1.0, 2.0, 16, 64)


@pytest.fixture(scope="module")
def fine_basis(fine):
    return HarmonicBasis(fine)


def test_basis_fields_pinned_exactly(basis_mid):
    m = basis_mid.mesh
    f = basis_mid.fields[0]
    assert np.all(f.values[m.component(1).nodes] == 1.0)
    assert np.all(f.values[m.component(0).nodes] == 0.0)
    inside = np.setdiff1d(np.arange(m.num_vertices), m.boundary_nodes)
    assert np.all((f.values[inside] > 0) & (f.values[inside] < 1))


def test_flux_rows_balance(basis_mid):
    # each basis field is discretely harmonic: its fluxes sum to zero
    col_sums = basis_mid.flux_rows.sum(axis=0)
    assert np.abs(col_sums).max() < 1e-10


def test_period_matrix_value(fine_basis):
    M = fine_basis.M
    assert M.shape == (1, 1)
    exact = 2 * math.pi / LN2
    assert M[0, 0] > 0
    assert abs(M[0, 0] - exact) < 0.01 * exact
    # symmetric positive definite
    assert np.all(np.linalg.eigvalsh(M) > 0)


def test_outer_flux_matches_criterion(fine_basis):
    # flux of the inner-component basis field through the outer boundary
    m = fine_basis.mesh
    z = np.zeros(m.num_vertices)
    fl = fem.consistent_flux(fine_basis.op, fine_basis.fields[0], z, 0)
    exact = -2 * math.pi / LN2
    assert abs(fl - exact) < 0.01 * abs(exact)


def test_dual_basis_inverts_period_matrix(fine_basis):
    d = compute_dual_basis(fine_basis)
    np.testing.assert_allclose(d.coefficients,
                               -np.linalg.inv(fine_basis.M), atol=1e-12)
    exact = -LN2 / (2 * math.pi)
    assert abs(d.coefficients[0, 0] - exact) < 0.01 * abs(exact)
    assert len(d.fields) == 1


def test_greens_flux_sum_equals_vorticity_integral(basis_mid):
    m = basis_mid.mesh
    rng = np.random.default_rng(11)
    w = fem.VorticityP0(m, rng.standard_normal(m.num_triangles))
    psi0, load = greens_operator(basis_mid, w)
    for c in m.components:
        assert np.abs(psi0.values[c.nodes]).max() == 0.0
    total = sum(fem.consistent_flux(basis_mid.op, psi0, load, c.comp)
                for c in m.components)
    integral = w.values @ m.tri_area
    assert abs(total - integral) < 1e-9 * max(1.0, abs(integral))


def test_biot_savart_no_slip_walls(basis_mid):
    m = basis_mid.mesh
    w = fem.VorticityP0(m, np.ones(m.num_triangles))
    u = biot_savart(basis_mid, w)
    for c in m.components:
        un = np.einsum("ed,ed->e", u.values[c.tri], c.normal)
        assert np.abs(un).max() < 1e-13


def test_positive_circulation_flows_clockwise(basis_mid):
    m = basis_mid.mesh
    w = fem.VorticityP0(m, np.zeros(m.num_triangles))
    asm = reconstruct_velocity(basis_mid, w, None, np.array([0.4]))
    cen = m.centroid
    th = np.arctan2(cen[:, 1], cen[:, 0])
    u_theta = (-np.sin(th) * asm.u.values[:, 0]
               + np.cos(th) * asm.u.values[:, 1])
    assert np.all(u_theta < 0)


def test_circulation_bookkeeping(basis_mid):
    m = basis_mid.mesh
    w = fem.VorticityP0(m, np.full(m.num_triangles, 0.5))
    asm = reconstruct_velocity(basis_mid, w, None, np.array([0.7]))
    # prescribed inner circulation is honoured to solver accuracy
    assert abs(asm.circulation_consistent[1] - 0.7) < 1e-10
    integral = w.values @ m.tri_area
    assert abs(asm.circulation_consistent.sum() - integral) < 1e-9


def test_circulation_trace_first_order():
    # the one-sided boundary quadrature converges linearly to the
    # variational circulation
    defects = []
    for nr in (8, 16):
        m = generate_annulus(1.0, 2.0, nr, 4 * nr)
        b = HarmonicBasis(m)
        w = fem.VorticityP0(m, np.full(m.num_triangles, 0.5))
        asm = reconstruct_velocity(b, w, None, np.array([0.7]))
        defects.append(np.abs(asm.circulation_trace
                              - asm.circulation_consistent).max())
    assert defects[0] < 0.4
    assert defects[1] < 0.7 * defects[0]


def test_stream_velocity_tangent_to_walls(basis_mid):
    m = basis_mid.mesh
    rng = np.random.default_rng(5)
    w = fem.VorticityP0(m, rng.standard_normal(m.num_triangles))
    asm = reconstruct_velocity(basis_mid, w, None, np.array([0.3]))
    for c in m.components:
        un = np.einsum("ed,ed->e", asm.u.values[c.tri], c.normal)
        assert np.abs(un).max() < 1e-13


def test_wrong_circulation_count_rejected(basis_mid):
    w = fem.VorticityP0(basis_mid.mesh,
                        np.zeros(basis_mid.mesh.num_triangles))
    with pytest.raises(UsageError, match="circulation"):
        reconstruct_velocity(basis_mid, w, None, np.array([0.1, 0.2]))


def test_sign_condition_wall_must_vanish():
    m = generate_annulus(1.0, 2.0, 4, 16)
    g = {0: np.full(len(m.component(0).edges), 0.1),
         1: np.zeros(len(m.component(1).edges))}
    with pytest.raises(PreconditionError) as exc:
        validate_sign_condition(m, g)
    msg = str(exc.value)
    assert "component 0" in msg and "wall" in msg and "edge" in msg


def test_sign_condition_inflow_sign():
    m = generate_annulus(1.0, 2.0, 4, 16, roles=("outflow", "inflow"))
    g = {0: np.full(len(m.component(0).edges), 0.1),
         1: np.full(len(m.component(1).edges), 0.1)}
    with pytest.raises(PreconditionError, match="inflow.*g <= 0"):
        validate_sign_condition(m, g)


def test_sign_condition_outflow_sign():
    m = generate_annulus(1.0, 2.0, 4, 16, roles=("outflow", "inflow"))
    g = {0: np.full(len(m.component(0).edges), -0.1),
         1: np.full(len(m.component(1).edges), -0.1)}
    with pytest.raises(PreconditionError, match="outflow"):
        validate_sign_condition(m, g)


def test_sign_condition_accepts_valid_data():
    m = generate_annulus(1.0, 2.0, 4, 16, roles=("outflow", "inflow"))
    g = {0: np.full(len(m.component(0).edges), 0.1),
         1: np.full(len(m.component(1).edges), -0.1)}
    validate_sign_condition(m, g)
    # tiny values below the relative tolerance are treated as zero
    g_wall = {0: np.full(len(m.component(0).edges), 0.1),
              1: np.full(len(m.component(1).edges), -0.1)}
    m2 = generate_annulus(1.0, 2.0, 4, 16, roles=("outflow", "wall"))
    g2 = {0: np.full(len(m2.component(0).edges), 0.1),
          1: np.full(len(m2.component(1).edges), 1e-18)}
    validate_sign_condition(m2, g2)


def test_elliptic_growth_proxy_bounded(basis_mid):
    m = basis_mid.mesh
    rng = np.random.default_rng(9)
    w = fem.VorticityP0(m, rng.uniform(-1.0, 1.0, m.num_triangles))
    asm = reconstruct_velocity(basis_mid, w, None, np.array([0.2]))
    rep = check_elliptic_growth(basis_mid, asm, w, None, np.array([0.2]))
    assert rep["bounded"]
    proxies = [row["proxy"] for row in rep["rows"]]
    assert all(np.isfinite(p) and p > 0 for p in proxies)
    # the p-scaled norms must not blow up with p
    assert max(proxies) < 50.0
