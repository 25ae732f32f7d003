"""Hodge-type velocity reconstruction on multiply connected domains.

A flow state is (vorticity, boundary flux g, circulations C_i on the inner
components).  The velocity splits as

    u = mult * grad(phi_g) + grad_perp(G[omega] + sum_i psi_i f^i)

where phi_g is the mean-zero potential carrying the through-flow, G is the
Green operator (laplace(G[omega]) = omega, zero trace), f^i is the harmonic
basis field of inner component i (trace 1 there, 0 elsewhere), and the
constants psi_i solve the circulation system

    sum_j M_ij psi_j = C_i - flux_i(G[omega]),   M_ij = flux_i(f^j).

All fluxes are consistent (variational) fluxes with the outward normal; for
a stream function the flux through component i equals the circulation along
it with the fluid kept on the left (outer loop counterclockwise, hole loops
clockwise).  On the annulus with radii (1, 2) this gives M_11 = 2*pi/ln 2
(positive: the dual basis coefficient is then -ln 2/(2*pi)), and a positive
prescribed circulation on the inner component drives flow that is clockwise
around the hole.

The boundary data g must satisfy the sign condition: g <= 0 on inflow
components, g >= 0 on outflow components, g = 0 on walls.  Violations are
hard errors naming the offending edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import PreconditionError, UsageError
from .fem import ScalarFieldP1, StiffnessOperator, VelocityP0, VorticityP0
from .mesh import Mesh

SIGN_TOL = 1e-12


def validate_sign_condition(mesh: Mesh, g_edges: dict[int, np.ndarray],
                            scale: float | None = None) -> None:
    """Enforce the sign condition on per-edge boundary data (tolerance
    1e-12 relative to the data scale)."""
    if scale is None:
        scale = max((float(np.abs(np.asarray(g)).max(initial=0.0))
                     for g in g_edges.values()), default=0.0)
    tol = SIGN_TOL * max(scale, 1.0)
    for comp in mesh.components:
        g = np.asarray(g_edges.get(comp.comp, np.zeros(len(comp.length))),
                       dtype=np.float64)
        if comp.role == "inflow":
            bad = np.nonzero(g > tol)[0]
            kind = "inflow data must satisfy g <= 0"
        elif comp.role == "outflow":
            bad = np.nonzero(g < -tol)[0]
            kind = "outflow data must satisfy g >= 0"
        else:
            bad = np.nonzero(np.abs(g) > tol)[0]
            kind = "wall data must vanish"
        if bad.size:
            e = int(bad[0])
            x, y = comp.midpoint[e]
            raise PreconditionError(
                f"sign condition violated on component {comp.comp} "
                f"({comp.role}): {kind}, but edge {e} at "
                f"({x:.6g}, {y:.6g}) carries g = {g[e]:.6e}")


class HarmonicBasis:
    """Harmonic fields of the inner components plus the flux matrix.

    ``fields[i]`` has trace 1 on inner component ``inner[i]`` and 0 on every
    other component.  ``flux_rows`` holds the consistent flux of each basis
    field through every component; ``M`` is its restriction to the inner
    components (symmetric positive definite up to solver tolerance).
    """

    def __init__(self, mesh: Mesh, op: StiffnessOperator | None = None):
        self.mesh = mesh
        self.op = op if op is not None else fem.assemble_stiffness(mesh)
        self.grads = self.op.grads
        self.inner = [c.comp for c in mesh.components[1:]]
        zero_load = np.zeros(mesh.num_vertices)
        self.fields: list[ScalarFieldP1] = []
        for cid in self.inner:
            bc = {c.comp: (1.0 if c.comp == cid else 0.0)
                  for c in mesh.components}
            self.fields.append(fem.solve_dirichlet(self.op, zero_load, bc))
        m = len(self.inner)
        ncomp = len(mesh.components)
        self.flux_rows = np.zeros((ncomp, m))
        for j, f in enumerate(self.fields):
            for c in mesh.components:
                self.flux_rows[c.comp, j] = fem.consistent_flux(
                    self.op, f, zero_load, c.comp)
        self.M = self.flux_rows[self.inner, :].copy() if m \
            else np.zeros((0, 0))

    @property
    def num_inner(self) -> int:
        return len(self.inner)


@dataclass
class DualBasis:
    """Linear combinations g^i of the harmonic basis with unit sink flux:
    flux_j(g^i) = -delta_ij on the inner components."""

    basis: HarmonicBasis
    coefficients: np.ndarray     # (m, m): column i solves M c = -e_i
    fields: list[ScalarFieldP1]


def compute_dual_basis(basis: HarmonicBasis) -> DualBasis:
    m = basis.num_inner
    if m == 0:
        return DualBasis(basis, np.zeros((0, 0)), [])
    coeff = np.linalg.solve(basis.M, -np.eye(m))
    fields = []
    for i in range(m):
        vals = np.zeros(basis.mesh.num_vertices)
        for j in range(m):
            vals += coeff[j, i] * basis.fields[j].values
        fields.append(ScalarFieldP1(basis.mesh, vals))
    return DualBasis(basis, coeff, fields)


def greens_operator(basis: HarmonicBasis, omega: VorticityP0,
                    x0: np.ndarray | None = None
                    ) -> tuple[ScalarFieldP1, np.ndarray]:
    """Zero-trace stream potential of a vorticity field.

    Returns (psi0, load) with laplace(psi0) = omega weakly, psi0 = 0 on the
    whole boundary; ``load`` is the right-hand side for flux pairings.
    ``x0`` warm-starts the solver (a previous time step's stream values).
    """
    load = -fem.p0_load_vector(basis.mesh, omega.values)
    bc = {c.comp: 0.0 for c in basis.mesh.components}
    return fem.solve_dirichlet(basis.op, load, bc, x0=x0), load


def biot_savart(basis: HarmonicBasis, omega: VorticityP0) -> VelocityP0:
    """K[omega]: the zero-circulation, zero-flux velocity of a vorticity."""
    psi0, _ = greens_operator(basis, omega)
    return fem.perp_gradient(basis.mesh, psi0, basis.grads)


@dataclass
class VelocityAssembly:
    """Reconstructed velocity with its stream data and flux diagnostics."""

    mesh: Mesh
    u: VelocityP0
    psi0: ScalarFieldP1            # Green part, zero trace
    psi_coeffs: np.ndarray         # (m,) harmonic-basis constants
    psi_total: ScalarFieldP1       # psi0 + sum_i psi_i f^i
    stream_load: np.ndarray        # load vector of psi_total's system
    phi: ScalarFieldP1 | None      # through-flow potential (unit multiplier)
    multiplier: float
    circulation_consistent: np.ndarray   # per component, consistent flux
    circulation_trace: np.ndarray        # per component, one-sided quadrature


def reconstruct_velocity(basis: HarmonicBasis, omega: VorticityP0,
                         g_edges: dict[int, np.ndarray] | None,
                         circulations: np.ndarray,
                         multiplier: float = 1.0,
                         phi: ScalarFieldP1 | None = None,
                         phi_grad: VelocityP0 | None = None,
                         psi_guess: np.ndarray | None = None
                         ) -> VelocityAssembly:
    """Assemble the velocity of (omega, g, C).

    ``circulations`` lists C_i for the inner components in order.  ``phi``
    and ``phi_grad`` may carry a cached unit-multiplier potential solve;
    otherwise the Neumann problem is solved here.  ``psi_guess`` warm-starts
    the Green solve.  The sign condition on g is a hard precondition.
    """
    mesh = basis.mesh
    C = np.asarray(circulations, dtype=np.float64)
    if C.shape != (basis.num_inner,):
        raise UsageError(
            f"need {basis.num_inner} circulation value(s), got {C.shape}")

    if g_edges:
        validate_sign_condition(mesh, g_edges)
        if phi is None:
            phi = fem.solve_neumann(basis.op, g_edges)
        if phi_grad is None:
            phi_grad = fem.gradient(mesh, phi, basis.grads)
    else:
        phi = None
        phi_grad = None

    psi0, load = greens_operator(basis, omega, x0=psi_guess)
    g0_flux = np.array([fem.consistent_flux(basis.op, psi0, load, c)
                        for c in basis.inner])
    coeffs = np.linalg.solve(basis.M, C - g0_flux) if basis.num_inner \
        else np.zeros(0)

    total = psi0.values.copy()
    for c_i, f in zip(coeffs, basis.fields):
        total += c_i * f.values
    psi_total = ScalarFieldP1(mesh, total)

    u_vals = fem.perp_gradient(mesh, psi_total, basis.grads).values
    if phi_grad is not None:
        u_vals = u_vals + multiplier * phi_grad.values
    u = VelocityP0(mesh, u_vals)

    ncomp = len(mesh.components)
    circ_cons = np.empty(ncomp)
    circ_trace = np.empty(ncomp)
    for comp in mesh.components:
        # the potential part contributes exactly zero circulation
        # (telescoping tangential P1 trace), so the stream flux is the
        # whole consistent circulation
        circ_cons[comp.comp] = fem.consistent_flux(
            basis.op, psi_total, load, comp.comp)
        ut = np.einsum("ed,ed->e", u.values[comp.tri], comp.tangent)
        circ_trace[comp.comp] = float(ut @ comp.length)

    return VelocityAssembly(
        mesh=mesh, u=u, psi0=psi0, psi_coeffs=coeffs, psi_total=psi_total,
        stream_load=load, phi=phi, multiplier=multiplier,
        circulation_consistent=circ_cons, circulation_trace=circ_trace)


def check_elliptic_growth(basis: HarmonicBasis, assembly: VelocityAssembly,
                          omega: VorticityP0,
                          g_edges: dict[int, np.ndarray] | None,
                          circulations: np.ndarray,
                          p_grid=(2, 4, 8, 16, 32)) -> dict:
    """Report the p-growth of the W^{1,p} proxy of u against
    p * (|omega|_p + |g|_inf + sum|C_i|); the flag asserts the whole
    sequence stays within twice its p = 2 value."""
    mesh = basis.mesh
    g_inf = 0.0
    if g_edges:
        g_inf = max(float(np.abs(np.asarray(g)).max(initial=0.0))
                    for g in g_edges.values()) * abs(assembly.multiplier)
    c_sum = float(np.abs(np.asarray(circulations)).sum())
    rows = []
    for p in p_grid:
        semi = fem.w1p_seminorm_p0(mesh, assembly.u, p, basis.grads)
        up = fem.lp_norm_p0(mesh, assembly.u.values, p)
        proxy = (up ** p + semi ** p) ** (1.0 / p)
        data = fem.lp_norm_p0(mesh, omega.values, p) + g_inf + c_sum
        rows.append({"p": p, "proxy": proxy,
                     "ratio": proxy / (p * data) if data > 0 else np.inf})
    base = rows[0]["ratio"]
    flag = all(r["ratio"] <= 2.0 * base + 1e-300 for r in rows)
    return {"rows": rows, "bounded": flag}
