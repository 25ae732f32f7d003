"""Numerical certificates for the difference of two transported flows.

Every estimate used by the uniqueness argument for bounded-vorticity flow
is realized here as a computable identity or inequality on a pair of runs
sharing one mesh and one boundary through-flow:

  * the kinetic-energy identity of the difference velocity,
  * the auxiliary-potential identity (its reversed-flow twin),
  * the Lamb-type integration-by-parts identity for velocity triples,
  * the boundary trace inequality for discrete-harmonic fields,
  * the interval ledger of the growth inequalities behind the Osgood loop,
  * the time-regularity bound for the stream coefficients.

Identity residuals are quadrature errors and must shrink under space-time
refinement; inequality rows must hold with a single empirical constant per
family.  Boundary integrands of a difference state use the tangentially
projected one-sided trace: the twins share g, so the normal trace of the
difference vanishes identically and the tangential sample is the whole
trace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem, zaremba
from .errors import PreconditionError, UsageError
from .fem import ScalarFieldP1, StiffnessOperator, VelocityP0, VorticityP0
from .mesh import Mesh
from .transport import Trajectory


def _trapz(vals, times):
    return float(np.trapezoid(np.asarray(vals), np.asarray(times)))


class TwinRun:
    """Snapshot-aligned difference state of two runs on one mesh.

    Run 1 is the reference flow (the 'hat' fields of the convective
    terms); the difference is run 1 minus run 2.
    """

    def __init__(self, traj1: Trajectory, traj2: Trajectory):
        if traj1.mesh is not traj2.mesh:
            raise UsageError("twin runs must share one mesh object")
        if traj1.basis is not traj2.basis:
            raise UsageError("twin runs must share one harmonic basis")
        if len(traj1.states) != len(traj2.states):
            raise UsageError("twin runs have different snapshot counts")
        t1 = traj1.times
        t2 = traj2.times
        T = traj1.scenario.T
        if np.abs(t1 - t2).max(initial=0.0) > 1e-13 * T:
            raise UsageError("twin runs have different snapshot times")
        for cid, g in traj1.g_edges.items():
            if not np.array_equal(g, traj2.g_edges.get(cid)):
                raise UsageError("twin runs must share the boundary data g")
        for s1, s2 in zip(traj1.states, traj2.states):
            if s1.assembly.multiplier != s2.assembly.multiplier:
                raise UsageError("twin runs must share the g multiplier")

        self.traj1 = traj1
        self.traj2 = traj2
        self.mesh: Mesh = traj1.mesh
        self.basis = traj1.basis
        self.times = t1
        mesh = self.mesh

        self.omega_d: list[np.ndarray] = []
        self.u_d: list[np.ndarray] = []
        self.psi_d: list[ScalarFieldP1] = []
        self.load_d: list[np.ndarray] = []
        self.coeff_d: list[np.ndarray] = []
        self.C_d: list[np.ndarray] = []
        self.aux: list[zaremba.AuxiliaryState] = []
        self.z_u = np.empty(len(t1))
        self.z_v = np.empty(len(t1))
        self.mult = np.array([s.assembly.multiplier for s in traj1.states])

        for k, (s1, s2) in enumerate(zip(traj1.states, traj2.states)):
            om = s1.omega - s2.omega
            ud = s1.assembly.u.values - s2.assembly.u.values
            psi = ScalarFieldP1(mesh, s1.assembly.psi_total.values
                                - s2.assembly.psi_total.values)
            load = s1.assembly.stream_load - s2.assembly.stream_load
            self.omega_d.append(om)
            self.u_d.append(ud)
            self.psi_d.append(psi)
            self.load_d.append(load)
            self.coeff_d.append(s1.assembly.psi_coeffs
                                - s2.assembly.psi_coeffs)
            self.C_d.append(s1.C - s2.C)
            aux = zaremba.solve_auxiliary(self.basis, psi,
                                          VorticityP0(mesh, om))
            self.aux.append(aux)
            area = mesh.tri_area
            self.z_u[k] = float(np.einsum("td,td,t->", ud, ud, area))
            self.z_v[k] = float(np.einsum("td,td,t->", aux.v.values,
                                          aux.v.values, area))

    # -- traces ---------------------------------------------------------

    def _tau(self, vals: np.ndarray, comp) -> np.ndarray:
        """One-sided tangential trace of a P0 velocity on a component."""
        return np.einsum("ed,ed->e", vals[comp.tri], comp.tangent)

    def _edge_density(self, vals: np.ndarray, load: np.ndarray, comp
                      ) -> np.ndarray:
        """Per-edge normal-derivative trace of a P1 field from the nodal
        consistent-flux density (superconvergent, unlike the one-sided
        cell gradient).  For a stream function this is the tangential
        velocity trace."""
        r = self.basis.op.apply(vals) - load
        nodes = comp.edges[:, 0]
        lumped = 0.5 * (comp.length + np.roll(comp.length, 1))
        dn = r[nodes] / lumped
        return 0.5 * (dn + np.roll(dn, -1))

    def _hat_tau_edges(self, k: int, comp) -> np.ndarray:
        """Tangential trace of the reference velocity: stream flux density
        plus the exact tangential derivative of the through-flow
        potential."""
        asm = self.traj1.states[k].assembly
        dens = self._edge_density(asm.psi_total.values, asm.stream_load,
                                  comp)
        if asm.phi is not None:
            a, b = comp.edges[:, 0], comp.edges[:, 1]
            dens = dens + asm.multiplier \
                * (asm.phi.values[b] - asm.phi.values[a]) / comp.length
        return dens

    def omega_in_diff(self, cid: int, t: float) -> float:
        return self.traj1.scenario.omega_in_value(cid, t) \
            - self.traj2.scenario.omega_in_value(cid, t)

    def _flow_components(self):
        for comp in self.mesh.components:
            g = self.traj1.g_edges.get(comp.comp)
            if g is not None and np.any(g != 0.0):
                yield comp, g

    # -- identities -----------------------------------------------------

    def energy_identity(self, k0: int = 0, k1: int | None = None) -> dict:
        """Kinetic-energy balance of the difference velocity:

            [ 1/2 |u|_2^2 ]  +  1/2 int_t int_Gamma |u|^2 g
                             +  int_t int_Omega u . ((u . grad) uhat) = 0.

        Returns the three terms and their defect; the residual is pure
        quadrature error and must vanish under refinement.
        """
        if k1 is None:
            k1 = len(self.times) - 1
        sl = slice(k0, k1 + 1)
        times = self.times[sl]
        mesh = self.mesh
        area = mesh.tri_area

        jump = 0.5 * (self.z_u[k1] - self.z_u[k0])

        bdry = []
        conv = []
        for k in range(k0, k1 + 1):
            ud = self.u_d[k]
            tot = 0.0
            for comp, g in self._flow_components():
                ut = self._edge_density(self.psi_d[k].values,
                                        self.load_d[k], comp)
                tot += float(np.sum(ut * ut * g * comp.length)) \
                    * self.mult[k]
            bdry.append(0.5 * tot)
            jac_hat = fem.velocity_gradient(
                mesh, self.traj1.states[k].assembly.u, self.basis.grads)
            adv = fem.convective_term(mesh, VelocityP0(mesh, ud), jac_hat)
            conv.append(float(np.einsum("td,td,t->", ud, adv, area)))

        b_int = _trapz(bdry, times)
        c_int = _trapz(conv, times)
        residual = jump + b_int + c_int
        scale = max(abs(jump), abs(b_int), abs(c_int),
                    0.5 * self.z_u[k0], 0.5 * self.z_u[k1], 1e-300)
        return {"kinetic_jump": jump, "boundary": b_int,
                "convective": c_int, "residual": residual,
                "relative": abs(residual) / scale}

    def aux_identity(self, k0: int = 0, k1: int | None = None) -> dict:
        """Balance law of the auxiliary (reversed-flow) potential:

            [ 1/2 |v|_2^2 ]  +  int_t int_{Gamma_in} |u|^2 (-g)
              = int_t [ int_{Gamma_out} (u . v)(-g)
                        + int_{Gamma_in} (u . uhat)(v . n)
                        - int_Omega ( u . ((v . grad) uhat)
                                      + v . ((u . grad) uhat) )
                        + int_Omega omegahat (u . v_perp)
                        + int_{Gamma_in} phi omega_in g ]
                - int_t sum_i psi_i' D_i.

        Here u is the difference velocity, v the auxiliary field, phi its
        potential, uhat / omegahat the reference flow, psi_i the stream
        coefficients of the difference, and D_i the consistent fluxes of
        phi.  All boundary quadratures use the tangentially projected
        one-sided traces; v . n on the inflow components is the exact
        P1 edge trace of the potential.
        """
        if k1 is None:
            k1 = len(self.times) - 1
        times = self.times[k0:k1 + 1]
        mesh = self.mesh
        area = mesh.tri_area

        jump = 0.5 * (self.z_v[k1] - self.z_v[k0])

        lhs_b, r_out, r_in, r_vol, r_curl, r_phi = [], [], [], [], [], []
        for k in range(k0, k1 + 1):
            ud = self.u_d[k]
            aux = self.aux[k]
            vv = aux.v.values
            mult = self.mult[k]
            t = self.times[k]

            bl = bo = bi = bp = 0.0
            for comp, g in self._flow_components():
                ut = self._edge_density(self.psi_d[k].values,
                                        self.load_d[k], comp)
                if comp.role == "inflow":
                    bl += float(np.sum(ut * ut * (-g) * comp.length)) * mult
                    hat_t = self._hat_tau_edges(k, comp)
                    vn = aux.normal_trace(comp)
                    bi += float(np.sum(ut * hat_t * vn * comp.length))
                    phim = 0.5 * (aux.phi.values[comp.edges[:, 0]]
                                  + aux.phi.values[comp.edges[:, 1]])
                    om_in = self.omega_in_diff(comp.comp, t)
                    bp += float(np.sum(phim * om_in * g * comp.length)) \
                        * mult
                elif comp.role == "outflow":
                    # v . tau is the flux density of the potential
                    # (load-free pairing: the potential is harmonic)
                    vt = self._edge_density(aux.phi.values,
                                            np.zeros(len(aux.phi.values)),
                                            comp)
                    bo += float(np.sum(ut * vt * (-g) * comp.length)) * mult
            lhs_b.append(bl)
            r_out.append(bo)
            r_in.append(bi)
            r_phi.append(bp)

            jac_hat = fem.velocity_gradient(
                mesh, self.traj1.states[k].assembly.u, self.basis.grads)
            term_u = fem.convective_term(mesh, aux.v, jac_hat)
            term_v = fem.convective_term(mesh, VelocityP0(mesh, ud), jac_hat)
            r_vol.append(-float(np.einsum("td,td,t->", ud, term_u, area)
                                + np.einsum("td,td,t->", vv, term_v, area)))

            om_hat = self.traj1.states[k].omega
            r_curl.append(float(np.einsum("t,td,td,t->", om_hat, ud,
                                          fem.rot90(vv), area)))

        coeffs = np.array(self.coeff_d[k0:k1 + 1])       # (K, m)
        dpsi = _dt_series(coeffs, times)
        D_in = np.array([[self.aux[k].D[c] for c in self.basis.inner]
                         for k in range(k0, k1 + 1)])
        coupling = -_trapz(np.einsum("km,km->k", dpsi, D_in), times)

        lhs = jump + _trapz(lhs_b, times)
        rhs = (_trapz(r_out, times) + _trapz(r_in, times)
               + _trapz(r_vol, times) + _trapz(r_curl, times)
               + _trapz(r_phi, times) + coupling)
        residual = lhs - rhs
        pieces = {"jump": jump, "inflow_energy": _trapz(lhs_b, times),
                  "outflow_cross": _trapz(r_out, times),
                  "inflow_cross": _trapz(r_in, times),
                  "convective": _trapz(r_vol, times),
                  "vortical": _trapz(r_curl, times),
                  "inflow_data": _trapz(r_phi, times),
                  "coupling": coupling}
        scale = max(*(abs(v) for v in pieces.values()),
                    0.5 * self.z_v[k0], 0.5 * self.z_v[k1], 1e-300)
        pieces.update({"residual": residual,
                       "relative": abs(residual) / scale})
        return pieces

    # -- stream-coefficient regularity ----------------------------------

    def psi_prime_diagnostic(self, k0: int = 0, k1: int | None = None
                             ) -> dict:
        """Certify the time-regularity bound of the stream coefficients:
        |psi'|_inf <= |M^{-1}|_inf (|C'|_1 + |flux(G[omega])'|_1) holds at
        every snapshot with the same difference quotients on both sides.
        """
        if k1 is None:
            k1 = len(self.times) - 1
        times = self.times[k0:k1 + 1]
        coeffs = np.array(self.coeff_d[k0:k1 + 1])
        C = np.array(self.C_d[k0:k1 + 1])
        g0 = C - coeffs @ self.basis.M.T        # flux of the Green part
        dpsi = _dt_series(coeffs, times)
        dC = _dt_series(C, times)
        dg0 = _dt_series(g0, times)
        minv = np.linalg.inv(self.basis.M) if self.basis.num_inner \
            else np.zeros((0, 0))
        mnorm = float(np.abs(minv).sum(axis=1).max(initial=0.0))
        lhs = np.abs(dpsi).max(axis=1, initial=0.0)
        rhs = mnorm * (np.abs(dC).sum(axis=1)
                       + np.abs(dg0).sum(axis=1))
        # deadband: the quotients of a time-constant difference are pure
        # round-off and must not trip the comparison
        dt_min = float(np.diff(times).min(initial=1.0))
        size = max(float(np.abs(arr).max(initial=0.0))
                   for arr in (coeffs, C, g0))
        noise = 64 * np.finfo(np.float64).eps * (1 + mnorm) \
            * size / max(dt_min, 1e-300)
        ratio = lhs / np.maximum(rhs + noise, 1e-300)
        return {"lhs_max": float(lhs.max(initial=0.0)),
                "rhs_max": float(rhs.max(initial=0.0)),
                "noise": float(noise),
                "max_ratio": float(ratio.max(initial=0.0)),
                "satisfied": bool(np.all(lhs <= rhs * (1 + 1e-12)
                                         + noise + 1e-300))}

    # -- inequality ledger ----------------------------------------------

    def inequality_ledger(self, p_grid=(2, 4, 8, 16, 32)) -> dict:
        """Per-interval, per-exponent rows of the two growth inequalities
        behind the uniqueness loop, with one empirical constant per family.

        energy row:   [E]  + 1/2 int int_Gamma |u|^2 g
                          <= C p int z_u^{1-1/p}
        aux row:      [1/2 z_v] + int int_{Gin} |u|^2 (-g)
                          <= C ( int (z + p z^{1-1/p}) + data^2 dt )

        z = z_u + z_v; data^2 is the squared circulation-difference size
        plus the squared inflow-trace difference, taken as a sup over the
        interval.  Flags list rows exceeding 1.01 * C * rhs (empty by
        construction of C).
        """
        rows = []
        n = len(self.times)
        for k in range(n - 1):
            e_terms = self.energy_identity(k, k + 1)
            a_terms = self.aux_identity(k, k + 1)
            dt = self.times[k + 1] - self.times[k]
            z = self.z_u[k:k + 2] + self.z_v[k:k + 2]
            t_pair = self.times[k:k + 2]

            data2 = max(float(np.sum(np.asarray(self.C_d[j]) ** 2))
                        for j in (k, k + 1))
            om_in2 = 0.0
            for comp, _ in self._flow_components():
                if comp.role == "inflow":
                    om_in2 += max(self.omega_in_diff(comp.comp, t) ** 2
                                  for t in t_pair)
            data2 += om_in2

            lhs_e = e_terms["kinetic_jump"] + e_terms["boundary"]
            lhs_a = a_terms["jump"] + a_terms["inflow_energy"]
            for p in p_grid:
                zu_pow = self.z_u[k:k + 2] ** (1.0 - 1.0 / p)
                rhs_e = p * _trapz(zu_pow, t_pair)
                z_pow = z + p * z ** (1.0 - 1.0 / p)
                rhs_a = _trapz(z_pow, t_pair) + data2 * dt
                rows.append({"interval": k, "p": p,
                             "lhs_energy": lhs_e, "rhs_energy": rhs_e,
                             "lhs_aux": lhs_a, "rhs_aux": rhs_a})

        def family(lkey, rkey):
            ratios = [max(r[lkey], 0.0) / r[rkey] for r in rows
                      if r[rkey] > 0]
            return max(ratios, default=0.0)

        c_energy = family("lhs_energy", "rhs_energy")
        c_aux = family("lhs_aux", "rhs_aux")
        flags = [r for r in rows
                 if max(r["lhs_energy"], 0.0) > 1.01 * c_energy
                 * r["rhs_energy"]
                 or max(r["lhs_aux"], 0.0) > 1.01 * c_aux * r["rhs_aux"]]
        return {"rows": rows, "C_hat": {"energy": c_energy, "aux": c_aux},
                "flags": flags}


def _dt_series(series: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Centered time differences on a snapshot series (one-sided ends)."""
    series = np.asarray(series, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    out = np.empty_like(series)
    if len(times) < 2:
        return np.zeros_like(series)
    out[0] = (series[1] - series[0]) / (times[1] - times[0])
    out[-1] = (series[-1] - series[-2]) / (times[-1] - times[-2])
    if len(times) > 2:
        span = (times[2:] - times[:-2]).reshape((-1,) + (1,)
                                                * (series.ndim - 1))
        out[1:-1] = (series[2:] - series[:-2]) / span
    return out


# -- Lamb-type identity -------------------------------------------------


def lamb_identity(mesh: Mesh, u: VelocityP0, v: VelocityP0, w: VelocityP0,
                  curl_u: np.ndarray | None = None,
                  curl_v: np.ndarray | None = None,
                  jac_w: np.ndarray | None = None,
                  grads: np.ndarray | None = None) -> dict:
    """Integration-by-parts identity for a velocity triple:

        oint (u.v)(w.n) - oint (u.w)(v.n) - oint (v.w)(u.n)
          = int (u.v) div w
            - int (curl u) (v_perp . w) - int (curl v) (u_perp . w)
            - int u.((v.grad) w) - int v.((u.grad) w).

    Curls and the Jacobian of w default to the recovered discrete values;
    analytic arrays may be passed to certify the quadratures alone.  All
    boundary integrands are full one-sided cell samples.
    """
    if grads is None:
        grads = fem.barycentric_gradients(mesh)
    if jac_w is None:
        jac_w = fem.velocity_gradient(mesh, w, grads)
    if curl_u is None:
        ju = fem.velocity_gradient(mesh, u, grads)
        curl_u = ju[:, 1, 0] - ju[:, 0, 1]
    if curl_v is None:
        jv = fem.velocity_gradient(mesh, v, grads)
        curl_v = jv[:, 1, 0] - jv[:, 0, 1]

    area = mesh.tri_area

    def pair_normal(a_vals, b_vals, c_vals):
        """oint (a . b)(c . n)."""
        tot = 0.0
        for comp in mesh.components:
            ab = np.einsum("ed,ed->e", a_vals[comp.tri], b_vals[comp.tri])
            cn = np.einsum("ed,ed->e", c_vals[comp.tri], comp.normal)
            tot += float(np.sum(ab * cn * comp.length))
        return tot

    uu, vv, ww = u.values, v.values, w.values
    lhs = pair_normal(uu, vv, ww) - pair_normal(uu, ww, vv) \
        - pair_normal(vv, ww, uu)

    div_w = jac_w[:, 0, 0] + jac_w[:, 1, 1]
    t_div = float(np.einsum("td,td,t,t->", uu, vv, div_w, area))
    t_cu = -float(np.einsum("t,td,td,t->", curl_u, fem.rot90(vv), ww, area))
    t_cv = -float(np.einsum("t,td,td,t->", curl_v, fem.rot90(uu), ww, area))
    adv_v = fem.convective_term(mesh, v, jac_w)
    adv_u = fem.convective_term(mesh, u, jac_w)
    t_au = -float(np.einsum("td,td,t->", uu, adv_v, area))
    t_av = -float(np.einsum("td,td,t->", vv, adv_u, area))

    rhs = t_div + t_cu + t_cv + t_au + t_av
    residual = lhs - rhs
    scale = max(abs(lhs), abs(t_div), abs(t_cu), abs(t_cv), abs(t_au),
                abs(t_av), 1e-300)
    return {"lhs": lhs, "div": t_div, "curl_u": t_cu, "curl_v": t_cv,
            "conv_u": t_au, "conv_v": t_av, "rhs": rhs,
            "residual": residual, "relative": abs(residual) / scale}


# -- boundary trace inequality ------------------------------------------


@dataclass
class TraceReport:
    lhs: float            # sum of squared nodal flux density over the loop
    tangential: float     # squared tangential-derivative seminorm
    energy: float         # Dirichlet energy of the field
    c_required: float     # smallest constant making the inequality hold


def trace_inequality(op: StiffnessOperator, field: ScalarFieldP1,
                     load: np.ndarray, comp_id: int) -> TraceReport:
    """Sharpest constant C in the normal-trace inequality

        |dfield/dn|_{-1/2,lumped}^2 <= |d_tau field|^2 + C |grad field|^2

    on one boundary component, for a discrete-harmonic field.  The left
    side is the lumped dual norm sum(r_a^2 / l_a) of the nodal consistent
    flux density; harmonicity away from the boundary is a precondition.
    """
    mesh = op.mesh
    resid_norm = fem.interior_residual_norm(op, field, load)
    if resid_norm > 10.0 * fem.solver_rtol():
        raise PreconditionError(
            f"trace inequality needs a discrete-harmonic field: interior "
            f"residual {resid_norm:.3e} exceeds 10*rtol")
    comp = mesh.component(comp_id)
    r = (op.apply(field.values) - load)
    nodes = comp.edges[:, 0]
    lumped = 0.5 * (comp.length + np.roll(comp.length, 1))
    lhs = float(np.sum(r[nodes] ** 2 / lumped))
    dtau = (field.values[comp.edges[:, 1]]
            - field.values[comp.edges[:, 0]]) / comp.length
    tangential = float(np.sum(dtau ** 2 * comp.length))
    energy = float(field.values @ op.apply(field.values))
    c_required = max(0.0, lhs - tangential) / max(energy, 1e-300)
    return TraceReport(lhs=lhs, tangential=tangential, energy=energy,
                       c_required=c_required)


# -- interpolation inequality -------------------------------------------


def interpolation_inequality(mesh: Mesh, values: np.ndarray, p: float
                             ) -> dict:
    """|w|_{2p/(p-1)} <= |w|_inf^{1/p} |w|_2^{(p-1)/p} for P0 fields
    (exact for the piecewise-constant quadrature; p > 1)."""
    if not p > 1:
        raise UsageError("interpolation inequality needs p > 1")
    q = 2.0 * p / (p - 1.0)
    lhs = fem.lp_norm_p0(mesh, values, q)
    rhs = fem.lp_norm_p0(mesh, values, np.inf) ** (1.0 / p) \
        * fem.lp_norm_p0(mesh, values, 2.0) ** ((p - 1.0) / p)
    return {"lhs": lhs, "rhs": rhs,
            "satisfied": lhs <= rhs * (1 + 1e-12) + 1e-300}
