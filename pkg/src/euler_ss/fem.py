"""P1 Lagrange finite elements on triangle meshes.

Fields:

* ``ScalarFieldP1``: one value per vertex, linear on each triangle;
* ``VelocityP0``: one 2-vector per triangle (gradients of P1 potentials);
* ``VorticityP0``: one scalar per triangle.

The stiffness matrix discretizes the Dirichlet energy: entry (a, b) is
sum_T grad(lambda_a) . grad(lambda_b) |T|.  All boundary-value solvers run
preconditioned conjugate gradients (Jacobi) at relative tolerance
``DEFAULT_RTOL`` (override with the EULER_SS_RTOL environment variable),
capped at 20*sqrt(unknowns) iterations.

The consistent flux of a solved field pairs its residual with the indicator
extension of one boundary component:

    flux_comp(psi) = chi_comp^T (A psi - load) = integral_comp dpsi/dn

with the outward normal of the mesh (out of the fluid, into holes).  For the
stream function of a flow this equals the circulation along the component in
the fluid-on-the-left orientation; it is superconvergent compared with the
one-sided trace quadrature.

perp-gradient convention: grad_perp(psi) = (-d_y psi, d_x psi), so
curl(grad_perp(psi)) = laplace(psi) and grad_perp(psi) . n = -d_tau(psi).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import PreconditionError, SolverError, UsageError
from .mesh import Mesh

DEFAULT_RTOL = 1e-10


def solver_rtol() -> float:
    """CG relative tolerance; EULER_SS_RTOL overrides the default 1e-10."""
    raw = os.environ.get("EULER_SS_RTOL")
    if raw is None:
        return DEFAULT_RTOL
    try:
        val = float(raw)
    except ValueError:
        raise UsageError(f"EULER_SS_RTOL={raw!r} is not a number") from None
    if not 0 < val < 1:
        raise UsageError(f"EULER_SS_RTOL={val} outside (0, 1)")
    return val


def rot90(v: np.ndarray) -> np.ndarray:
    """Rotate 2-vectors by +90 degrees: (x, y) -> (-y, x)."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


# -- fields -------------------------------------------------------------


@dataclass
class ScalarFieldP1:
    mesh: Mesh
    values: np.ndarray      # (V,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.mesh.num_vertices,):
            raise UsageError(
                f"P1 field needs {self.mesh.num_vertices} values, "
                f"got shape {self.values.shape}")


@dataclass
class VorticityP0:
    mesh: Mesh
    values: np.ndarray      # (T,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.mesh.num_triangles,):
            raise UsageError(
                f"P0 field needs {self.mesh.num_triangles} values, "
                f"got shape {self.values.shape}")


@dataclass
class VelocityP0:
    mesh: Mesh
    values: np.ndarray      # (T, 2)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.mesh.num_triangles, 2):
            raise UsageError(
                f"P0 velocity needs shape ({self.mesh.num_triangles}, 2), "
                f"got {self.values.shape}")


# -- assembly -----------------------------------------------------------


def barycentric_gradients(mesh: Mesh) -> np.ndarray:
    """(T, 3, 2) array: gradient of hat function lambda_i on each triangle.

    For a counterclockwise triangle (p0, p1, p2):
    grad(lambda_i) = rot90(p_{i+2} - p_{i+1}) / (2 |T|).
    """
    v = mesh.vertices[mesh.triangles]
    g = np.empty((mesh.num_triangles, 3, 2))
    for i in range(3):
        g[:, i] = rot90(v[:, (i + 2) % 3] - v[:, (i + 1) % 3])
    g /= (2.0 * mesh.tri_area)[:, None, None]
    return g


class StiffnessOperator:
    """Sparse stiffness matrix with cached element data."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.grads = barycentric_gradients(mesh)
        area = mesh.tri_area
        rows, cols, vals = [], [], []
        for i in range(3):
            for j in range(3):
                rows.append(mesh.triangles[:, i])
                cols.append(mesh.triangles[:, j])
                vals.append(np.einsum("td,td->t", self.grads[:, i],
                                      self.grads[:, j]) * area)
        n = mesh.num_vertices
        self.matrix = sp.csr_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n))
        self.matrix.sum_duplicates()

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x


def assemble_stiffness(mesh: Mesh) -> StiffnessOperator:
    return StiffnessOperator(mesh)


def p0_load_vector(mesh: Mesh, cell_values: np.ndarray) -> np.ndarray:
    """Nodal load b_a = integral(f * lambda_a) for piecewise constant f."""
    cell_values = np.asarray(cell_values, dtype=np.float64)
    contrib = cell_values * mesh.tri_area / 3.0
    b = np.zeros(mesh.num_vertices)
    for i in range(3):
        np.add.at(b, mesh.triangles[:, i], contrib)
    return b


def boundary_load_vector(mesh: Mesh, comp_data: dict[int, np.ndarray]
                         ) -> np.ndarray:
    """Nodal load b_a = integral_Gamma(q * lambda_a) from per-edge midpoint
    values of q on the named components (trapezoid, exact for P1 traces)."""
    b = np.zeros(mesh.num_vertices)
    for cid, q in comp_data.items():
        comp = mesh.component(cid)
        q = np.asarray(q, dtype=np.float64)
        if q.shape != comp.length.shape:
            raise UsageError(
                f"component {cid}: expected {len(comp.length)} edge values, "
                f"got shape {q.shape}")
        w = 0.5 * q * comp.length
        np.add.at(b, comp.edges[:, 0], w)
        np.add.at(b, comp.edges[:, 1], w)
    return b


# -- conjugate gradients ------------------------------------------------


def _pcg(A: sp.csr_matrix, b: np.ndarray, rtol: float,
         deflate_constant: bool = False,
         x0: np.ndarray | None = None) -> np.ndarray:
    """Jacobi-preconditioned CG; optionally projects out the constant
    null space (pure Neumann problems).  Raises SolverError on stall."""
    n = len(b)
    diag = A.diagonal().copy()
    # pinned rows keep diag 1 from the caller; guard against zeros anyway
    diag[diag <= 0] = 1.0
    inv_diag = 1.0 / diag

    def project(v):
        if deflate_constant:
            v = v - v.mean()
        return v

    b = project(b)
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return np.zeros(n)
    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = project(np.asarray(x0, dtype=np.float64).copy())
        r = b - A @ x
        if np.linalg.norm(r) <= rtol * norm_b:
            return x
    z = project(inv_diag * r)
    p = z.copy()
    rz = float(r @ z)
    maxiter = max(int(20 * np.sqrt(n)), 50)
    for _ in range(maxiter):
        Ap = A @ p
        denom = float(p @ Ap)
        if denom <= 0.0:
            raise SolverError(
                f"CG breakdown: non-positive curvature {denom:.3e}")
        alpha = rz / denom
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * norm_b:
            return project(x) if deflate_constant else x
        z = project(inv_diag * r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach rtol={rtol:.1e} in {maxiter} iterations "
        f"(residual {np.linalg.norm(r) / norm_b:.3e})")


def _reduced_solve(op: StiffnessOperator, load: np.ndarray,
                   pinned: np.ndarray, pinned_values: np.ndarray,
                   rtol: float, x0: np.ndarray | None = None) -> np.ndarray:
    """Symmetric elimination of pinned nodes, CG on the reduced system."""
    n = op.mesh.num_vertices
    mask = np.zeros(n, dtype=bool)
    mask[pinned] = True
    x = np.zeros(n)
    x[pinned] = pinned_values
    free = np.nonzero(~mask)[0]
    if free.size == 0:
        return x
    A = op.matrix
    b = load[free] - (A @ x)[free]
    A_ff = A[free][:, free].tocsr()
    x[free] = _pcg(A_ff, b, rtol, x0=None if x0 is None else x0[free])
    return x


# -- boundary-value solvers --------------------------------------------


def _dirichlet_trace(mesh: Mesh, bc) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a Dirichlet spec to (node indices, values).

    ``bc`` is either a dict {component id: constant} or a full nodal array
    whose boundary values are used as the trace.
    """
    if isinstance(bc, dict):
        nodes, vals = [], []
        for cid, val in bc.items():
            cn = mesh.component_nodes(cid)
            nodes.append(cn)
            vals.append(np.full(len(cn), float(val)))
        if not nodes:
            raise UsageError("empty Dirichlet specification")
        return np.concatenate(nodes), np.concatenate(vals)
    arr = np.asarray(bc, dtype=np.float64)
    if arr.shape != (mesh.num_vertices,):
        raise UsageError(
            f"Dirichlet trace must be a dict or an ({mesh.num_vertices},) "
            f"array, got shape {arr.shape}")
    nodes = mesh.boundary_nodes
    return nodes, arr[nodes]


def solve_dirichlet(op: StiffnessOperator, load: np.ndarray, bc,
                    rtol: float | None = None,
                    x0: np.ndarray | None = None) -> ScalarFieldP1:
    """Solve A u = load with the trace pinned on every boundary component.

    ``load`` is the right-hand side of the variational problem
    integral(grad u . grad chi) = load(chi); for the Poisson problem
    laplace(u) = f it is ``-p0_load_vector(mesh, f)``.  ``x0`` is an
    optional warm-start guess (full nodal vector).
    """
    mesh = op.mesh
    rtol = solver_rtol() if rtol is None else rtol
    nodes, vals = _dirichlet_trace(mesh, bc)
    if not np.isin(mesh.boundary_nodes, nodes).all():
        raise UsageError("Dirichlet solve requires data on every component")
    return ScalarFieldP1(mesh,
                         _reduced_solve(op, load, nodes, vals, rtol, x0=x0))


def solve_neumann(op: StiffnessOperator, g_edges: dict[int, np.ndarray],
                  rtol: float | None = None) -> ScalarFieldP1:
    """Solve the pure Neumann problem integral(grad u . grad chi) =
    integral_Gamma(g chi) with the mean-zero gauge.

    ``g_edges`` maps component id to per-edge midpoint values of the normal
    derivative (outward normal).  The data must be compatible: the total
    boundary integral of g vanishes up to 1e-10 * |Gamma| * max|g|.
    """
    mesh = op.mesh
    rtol = solver_rtol() if rtol is None else rtol
    total = 0.0
    scale = 0.0
    length = 0.0
    for cid, q in g_edges.items():
        comp = mesh.component(cid)
        q = np.asarray(q, dtype=np.float64)
        total += float(q @ comp.length)
        scale = max(scale, float(np.abs(q).max(initial=0.0)))
        length += comp.total_length
    for comp in mesh.components:
        length += 0.0 if comp.comp in g_edges else comp.total_length
    if abs(total) > 1e-10 * max(length * scale, 1e-300):
        raise PreconditionError(
            f"incompatible Neumann data: net boundary flux {total:.6e} "
            f"exceeds 1e-10 * {length * scale:.6e}")
    b = boundary_load_vector(mesh, g_edges)
    x = _pcg(op.matrix, b, rtol, deflate_constant=True)
    return ScalarFieldP1(mesh, x)


def solve_mixed(op: StiffnessOperator, dirichlet: dict[int, float],
                neumann: dict[int, np.ndarray],
                rtol: float | None = None) -> ScalarFieldP1:
    """Zaremba problem: constants pinned on the Dirichlet components,
    per-edge normal-derivative data on the Neumann components."""
    mesh = op.mesh
    rtol = solver_rtol() if rtol is None else rtol
    if not dirichlet:
        raise UsageError("mixed solve needs at least one Dirichlet component")
    overlap = set(dirichlet) & set(neumann)
    if overlap:
        raise UsageError(f"components {sorted(overlap)} listed as both "
                         "Dirichlet and Neumann")
    load = boundary_load_vector(mesh, neumann) if neumann else \
        np.zeros(mesh.num_vertices)
    nodes, vals = _dirichlet_trace(mesh, dirichlet)
    return ScalarFieldP1(mesh, _reduced_solve(op, load, nodes, vals, rtol))


def solve_constrained(op: StiffnessOperator, load: np.ndarray,
                      pinned_nodes: np.ndarray, pinned_values: np.ndarray,
                      rtol: float | None = None) -> ScalarFieldP1:
    """General solve with an explicit pinned-node set (used by the
    auxiliary-function machinery, where only some components are pinned)."""
    rtol = solver_rtol() if rtol is None else rtol
    x = _reduced_solve(op, load, np.asarray(pinned_nodes, dtype=np.int64),
                       np.asarray(pinned_values, dtype=np.float64), rtol)
    return ScalarFieldP1(op.mesh, x)


# -- consistent fluxes --------------------------------------------------


def consistent_flux(op: StiffnessOperator, field: ScalarFieldP1,
                    load: np.ndarray, comp: int) -> float:
    """Variational flux integral_comp(dfield/dn), outward normal.

    ``load`` must be the load vector of the system the field solves (zero
    for a harmonic field).  The pairing with the component indicator makes
    the flux superconvergent.
    """
    mesh = op.mesh
    residual = op.matrix @ field.values - load
    nodes = mesh.component_nodes(comp)
    return float(residual[nodes].sum())


def nodal_flux_density(op: StiffnessOperator, field: ScalarFieldP1,
                       load: np.ndarray, comp: int) -> np.ndarray:
    """Per-node normal derivative on a component: the nodal residual divided
    by the lumped boundary length (half the two adjacent edges)."""
    mesh = op.mesh
    c = mesh.component(comp)
    residual = op.matrix @ field.values - load
    weight = np.zeros(mesh.num_vertices)
    np.add.at(weight, c.edges[:, 0], 0.5 * c.length)
    np.add.at(weight, c.edges[:, 1], 0.5 * c.length)
    nodes = np.unique(c.nodes)
    return residual[nodes] / weight[nodes]


def interior_residual_norm(op: StiffnessOperator, field: ScalarFieldP1,
                           load: np.ndarray) -> float:
    """Relative Galerkin residual on interior nodes; near zero for any
    solved field, used to certify harmonicity of inputs."""
    mesh = op.mesh
    interior = np.setdiff1d(np.arange(mesh.num_vertices),
                            mesh.boundary_nodes)
    if interior.size == 0:
        return 0.0
    r = (op.matrix @ field.values - load)[interior]
    scale = max(float(np.abs(op.matrix @ field.values).max()),
                float(np.abs(load).max()), 1e-300)
    return float(np.abs(r).max()) / scale


# -- discrete calculus --------------------------------------------------


def gradient(mesh: Mesh, field: ScalarFieldP1,
             grads: np.ndarray | None = None) -> VelocityP0:
    """Per-triangle gradient of a P1 field."""
    if grads is None:
        grads = barycentric_gradients(mesh)
    vals = np.einsum("tid,ti->td", grads, field.values[mesh.triangles])
    return VelocityP0(mesh, vals)


def perp_gradient(mesh: Mesh, field: ScalarFieldP1,
                  grads: np.ndarray | None = None) -> VelocityP0:
    """Per-triangle grad_perp = (-d_y, d_x) of a P1 field."""
    g = gradient(mesh, field, grads)
    return VelocityP0(mesh, rot90(g.values))


def p0_to_p1(mesh: Mesh, cell_values: np.ndarray) -> np.ndarray:
    """Area-weighted nodal averaging of a per-cell quantity (any trailing
    shape), the recovery used for gradients of P0 velocities."""
    cell_values = np.asarray(cell_values, dtype=np.float64)
    out = np.zeros((mesh.num_vertices,) + cell_values.shape[1:])
    wsum = np.zeros(mesh.num_vertices)
    w = mesh.tri_area
    weighted = cell_values * w.reshape((-1,) + (1,) * (cell_values.ndim - 1))
    for i in range(3):
        np.add.at(out, mesh.triangles[:, i], weighted)
        np.add.at(wsum, mesh.triangles[:, i], w)
    return out / wsum.reshape((-1,) + (1,) * (cell_values.ndim - 1))


def velocity_gradient(mesh: Mesh, u: VelocityP0,
                      grads: np.ndarray | None = None) -> np.ndarray:
    """(T, 2, 2) recovered Jacobian J[t, k, d] = d_d(u_k): each component
    is averaged to the vertices, then differentiated per triangle."""
    if grads is None:
        grads = barycentric_gradients(mesh)
    nodal = p0_to_p1(mesh, u.values)                     # (V, 2)
    # J[t, k, d] = sum_i grads[t, i, d] * nodal[tri[t, i], k]
    return np.einsum("tid,tik->tkd", grads, nodal[mesh.triangles])


def convective_term(mesh: Mesh, a: VelocityP0, jac_b: np.ndarray
                    ) -> np.ndarray:
    """(T, 2) cellwise (a . grad) b given the recovered Jacobian of b."""
    return np.einsum("tkd,td->tk", jac_b, a.values)


# -- norms --------------------------------------------------------------


def lp_norm_p0(mesh: Mesh, values: np.ndarray, p: float) -> float:
    """L^p norm of a P0 field; (T, 2) arrays use the Euclidean cell norm.

    Powers are taken of magnitudes scaled by the max, so large exponents
    cannot overflow; the scaled sum is at least one cell's area.
    """
    values = np.asarray(values, dtype=np.float64)
    mag = np.abs(values) if values.ndim == 1 else \
        np.linalg.norm(values, axis=1)
    top = float(mag.max(initial=0.0))
    if np.isinf(p) or top == 0.0:
        return top
    return top * float((mesh.tri_area @ (mag / top) ** p) ** (1.0 / p))


def lp_norm_p1(mesh: Mesh, field: ScalarFieldP1, p: float) -> float:
    """L^p norm of a P1 field by the 3-midpoint rule (exact to degree 2);
    the L-infinity norm is the nodal max (exact for linears)."""
    top = float(np.abs(field.values).max(initial=0.0))
    if np.isinf(p) or top == 0.0:
        return top
    v = field.values[mesh.triangles] / top               # (T, 3)
    mids = 0.5 * (v + np.roll(v, -1, axis=1))            # edge midpoints
    cell = (np.abs(mids) ** p).sum(axis=1) * mesh.tri_area / 3.0
    return top * float(cell.sum() ** (1.0 / p))


def w1p_seminorm_p0(mesh: Mesh, u: VelocityP0, p: float,
                    grads: np.ndarray | None = None) -> float:
    """L^p norm of the recovered velocity Jacobian (Frobenius per cell)."""
    jac = velocity_gradient(mesh, u, grads)
    mag = np.linalg.norm(jac.reshape(len(jac), 4), axis=1)
    if np.isinf(p):
        return float(mag.max(initial=0.0))
    return float((mesh.tri_area @ mag ** p) ** (1.0 / p))


# -- VTK output ---------------------------------------------------------


def write_vtk(path, mesh: Mesh, point_data=None, cell_data=None,
              title="euler-ss fields") -> None:
    """Legacy ASCII VTK unstructured grid; scalars and 2-vectors (padded to
    3 components) on points (P1) and cells (P0)."""
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.num_vertices} double"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g} 0")
    nt = mesh.num_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)

    def emit(block, count, data):
        lines.append(f"{block} {count}")
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{v:.17g}" for v in arr)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{v[0]:.17g} {v[1]:.17g} 0" for v in arr)

    if point_data:
        emit("POINT_DATA", mesh.num_vertices, point_data)
    if cell_data:
        emit("CELL_DATA", nt, cell_data)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
