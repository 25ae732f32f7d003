"""Finite-volume vorticity transport by the reconstructed flow.

The scheme is donor-cell upwinding on the triangle mesh with edge fluxes
split into a rotational and a through-flow part:

  * the rotational part is the stream-function jump across the edge,
    F = psi_a - psi_b for the edge directed a -> b with the flux counted out
    of the left cell.  Summed around any cell the jumps telescope, so this
    part is exactly divergence free and exactly conservative; on boundary
    edges it vanishes identically because the stream trace is constant per
    component.
  * the through-flow part starts from averaged-gradient fluxes of the
    potential and is then projected onto the divergence-free constraint by
    a correction supported on interior edges (a cell-graph Laplacian solve).
    Boundary through-flow fluxes are prescribed exactly as g * length *
    multiplier, never approximated, so boundary budgets are exact.

Time stepping is forward Euler (optionally a two-stage strong-stability
update) under a CFL cap combining the incircle-diameter travel time with a
positivity cap on the total outflux of each cell; steps land exactly on the
requested snapshot times.  Circulations on the inner components evolve by
the boundary vorticity flux, accumulated by the same code path that serves
the vorticity budget, so the two stay consistent to round-off.

Scenario files are strict JSON: unknown keys anywhere are errors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import fem, hodge
from .errors import PreconditionError, SolverError, UsageError
from .fem import ScalarFieldP1, VelocityP0, VorticityP0
from .hodge import HarmonicBasis, VelocityAssembly
from .mesh import ROLES, Mesh, generate_annulus, load_mesh, uniform_refine

MAX_STEPS_PER_INTERVAL = 2_000_000


def _check_keys(d: dict, where: str, required=(), optional=()) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(required) - set(optional))
    if unknown:
        raise UsageError(f"{where}: unknown key(s) {unknown}")
    missing = sorted(set(required) - set(d))
    if missing:
        raise UsageError(f"{where}: missing key(s) {missing}")


def _number(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise UsageError(f"{where}: expected a number, got {x!r}")
    v = float(x)
    if not math.isfinite(v):
        raise UsageError(f"{where}: non-finite value {x!r}")
    return v


def _table(spec: dict, where: str, xkey: str):
    """Validated (x, y) sample arrays for a tabulated profile."""
    xs = spec[xkey]
    ys = spec["values"]
    if not isinstance(xs, list) or not isinstance(ys, list) \
            or len(xs) != len(ys) or len(xs) < 2:
        raise UsageError(f"{where}: '{xkey}' and 'values' must be equal-length "
                         "lists with at least two samples")
    x = np.array([_number(v, where) for v in xs])
    y = np.array([_number(v, where) for v in ys])
    if np.any(np.diff(x) <= 0):
        raise UsageError(f"{where}: '{xkey}' samples must be increasing")
    return x, y


class _Profile:
    """Constant or linearly interpolated scalar profile."""

    def __init__(self, spec: dict, where: str, xkey: str,
                 periodic: bool = False):
        if isinstance(spec, dict) and "profile" in spec \
                and "type" not in spec:
            spec = {**spec}
            spec["type"] = spec.pop("profile")
        _check_keys(spec, where, required=("type",),
                    optional=("value", xkey, "values"))
        self.kind = spec["type"]
        self.periodic = periodic
        if self.kind == "constant":
            _check_keys(spec, where, required=("type", "value"))
            self.value = _number(spec["value"], where)
        elif self.kind == "tabulated":
            _check_keys(spec, where, required=("type", xkey, "values"))
            self.x, self.y = _table(spec, where, xkey)
            if periodic and not (self.x[0] >= 0.0 and self.x[-1] <= 1.0):
                raise UsageError(f"{where}: arclength fractions must lie "
                                 "in [0, 1]")
        else:
            raise UsageError(f"{where}: unknown profile type {self.kind!r}")

    def __call__(self, x):
        if self.kind == "constant":
            return self.value if np.isscalar(x) \
                else np.full(np.shape(x), self.value)
        if self.periodic:
            xs = np.concatenate([self.x, [self.x[0] + 1.0]])
            ys = np.concatenate([self.y, [self.y[0]]])
            return np.interp(np.mod(x, 1.0), xs, ys)
        return np.interp(x, self.x, self.y)

    def extrema(self):
        if self.kind == "constant":
            return self.value, self.value
        return float(self.y.min()), float(self.y.max())


def _comp_key(key, where: str) -> int:
    try:
        return int(key)
    except (TypeError, ValueError):
        raise UsageError(f"{where}: component keys must be integers, "
                         f"got {key!r}") from None


class Scenario:
    """Validated simulation setup; resolves data onto any compatible mesh."""

    def __init__(self, doc: dict, base_dir: Path | str = "."):
        self.base_dir = Path(base_dir)
        _check_keys(doc, "scenario",
                    required=("mesh", "omega0", "T", "cfl", "snapshots"),
                    optional=("g", "g_multiplier", "omega_in", "C0",
                              "scheme"))
        self.mesh_spec = doc["mesh"]
        self.mesh = self._build_mesh(self.mesh_spec)

        self.T = _number(doc["T"], "T")
        if self.T <= 0:
            raise UsageError("T must be positive")
        self.cfl = _number(doc["cfl"], "cfl")
        if not 0 < self.cfl <= 1:
            raise UsageError("cfl must lie in (0, 1]")
        sn = doc["snapshots"]
        if isinstance(sn, bool) or not isinstance(sn, int) or sn < 1:
            raise UsageError("snapshots must be a positive integer")
        self.snapshots = sn
        self.scheme = doc.get("scheme", "euler")
        if self.scheme not in ("euler", "rk2"):
            raise UsageError(f"unknown scheme {self.scheme!r} "
                             "(expected 'euler' or 'rk2')")

        comp_ids = {c.comp for c in self.mesh.components}
        raw_g = doc.get("g", {})
        if isinstance(raw_g, list):
            flat = {}
            for item in raw_g:
                if not isinstance(item, dict) or "comp" not in item:
                    raise UsageError("g: list entries need a 'comp' key")
                item = {**item}
                cid = _comp_key(item.pop("comp"), "g")
                if cid in flat:
                    raise UsageError(f"g: component {cid} given twice")
                flat[cid] = item
            raw_g = flat
        self.g_profiles: dict[int, _Profile] = {}
        for key, spec in dict(raw_g).items():
            cid = _comp_key(key, "g")
            if cid not in comp_ids:
                raise UsageError(f"g: no boundary component {cid}")
            role = self.mesh.component(cid).role
            if role == "wall":
                raise UsageError(f"g: component {cid} is a wall; boundary "
                                 "data belongs on inflow/outflow components")
            self.g_profiles[cid] = _Profile(spec, f"g[{cid}]", "s",
                                            periodic=True)
        for c in self.mesh.components:
            if c.role != "wall" and c.comp not in self.g_profiles:
                raise UsageError(f"g: component {c.comp} has role "
                                 f"{c.role!r} but no boundary data")

        if "g_multiplier" in doc:
            self.mult_profile = _Profile(doc["g_multiplier"], "g_multiplier",
                                         "times")
            lo, _ = self.mult_profile.extrema()
            if lo < 0:
                raise UsageError("g_multiplier must be nonnegative "
                                 "(a sign change would swap the roles)")
        else:
            self.mult_profile = None

        self.omega0_spec = doc["omega0"]
        self._validate_omega0(self.omega0_spec)

        self.omega_in: dict[int, _Profile] = {}
        for key, spec in dict(doc.get("omega_in", {})).items():
            cid = _comp_key(key, "omega_in")
            if cid not in comp_ids:
                raise UsageError(f"omega_in: no boundary component {cid}")
            if self.mesh.component(cid).role != "inflow":
                raise UsageError(f"omega_in: component {cid} is not an "
                                 "inflow component")
            self.omega_in[cid] = _Profile(spec, f"omega_in[{cid}]", "times")
        for c in self.mesh.components:
            if c.role == "inflow" and c.comp not in self.omega_in:
                raise UsageError(f"omega_in: inflow component {c.comp} "
                                 "needs trace data")

        self.C0: dict[int, float] = {}
        for key, val in dict(doc.get("C0", {})).items():
            cid = _comp_key(key, "C0")
            if cid not in comp_ids or cid == 0:
                raise UsageError(f"C0: component {cid} is not an inner "
                                 "component")
            self.C0[cid] = _number(val, f"C0[{cid}]")

    # -- mesh -----------------------------------------------------------

    def _build_mesh(self, spec) -> Mesh:
        if isinstance(spec, str):
            return load_mesh(self.base_dir / spec)
        _check_keys(spec, "mesh", optional=("annulus", "path"))
        if ("annulus" in spec) == ("path" in spec):
            raise UsageError("mesh: give exactly one of 'annulus' or 'path'")
        if "path" in spec:
            return load_mesh(self.base_dir / spec["path"])
        ann = spec["annulus"]
        _check_keys(ann, "mesh.annulus", required=("r0", "r1", "nr", "ntheta"),
                    optional=("roles",))
        r0 = _number(ann["r0"], "mesh.annulus.r0")
        r1 = _number(ann["r1"], "mesh.annulus.r1")
        nr, ntheta = ann["nr"], ann["ntheta"]
        for name, v in (("nr", nr), ("ntheta", ntheta)):
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise UsageError(f"mesh.annulus.{name} must be a positive "
                                 "integer")
        roles = ann.get("roles", ["wall", "wall"])
        if not (isinstance(roles, list) and len(roles) == 2
                and all(r in ROLES for r in roles)):
            raise UsageError("mesh.annulus.roles must be a list of two of "
                             f"{ROLES} (outer first)")
        if not 0 < r0 < r1:
            raise UsageError("mesh.annulus needs 0 < r0 < r1")
        return generate_annulus(r0, r1, nr, ntheta, roles=tuple(roles))

    def refined(self, factor: int = 2) -> "Scenario":
        """The same scenario on a mesh refined by ``factor`` (a power of 2).

        The CFL cap scales the time step with the mesh, so this refines
        space and time together.
        """
        if factor < 1 or factor & (factor - 1):
            raise UsageError("refinement factor must be a power of two")
        other = Scenario.__new__(Scenario)
        other.__dict__.update(self.__dict__)
        if isinstance(self.mesh_spec, dict) and "annulus" in self.mesh_spec:
            ann = dict(self.mesh_spec["annulus"])
            ann["nr"] = ann["nr"] * factor
            ann["ntheta"] = ann["ntheta"] * factor
            other.mesh_spec = {"annulus": ann}
            other.mesh = self._build_mesh(other.mesh_spec)
        else:
            m = self.mesh
            f = factor
            while f > 1:
                m = uniform_refine(m)
                f //= 2
            other.mesh = m
        return other

    # -- data on a mesh -------------------------------------------------

    def g_edges(self, mesh: Mesh | None = None) -> dict[int, np.ndarray]:
        """Per-edge boundary data at unit multiplier."""
        mesh = mesh or self.mesh
        out = {}
        for cid, prof in self.g_profiles.items():
            comp = mesh.component(cid)
            s = (np.cumsum(comp.length) - 0.5 * comp.length) \
                / comp.total_length
            out[cid] = np.asarray(prof(s), dtype=np.float64)
        return out

    def multiplier(self, t: float) -> float:
        return 1.0 if self.mult_profile is None \
            else float(self.mult_profile(t))

    def omega_in_value(self, cid: int, t: float) -> float:
        return float(self.omega_in[cid](t))

    def _validate_omega0(self, spec) -> None:
        _check_keys(spec, "omega0", required=("type",),
                    optional=("value", "r0", "r1", "background", "path"))
        kind = spec["type"]
        if kind == "constant":
            _check_keys(spec, "omega0", required=("type", "value"))
            _number(spec["value"], "omega0.value")
        elif kind == "annular_band":
            _check_keys(spec, "omega0", required=("type", "r0", "r1", "value"),
                        optional=("background",))
            for k in ("r0", "r1", "value"):
                _number(spec[k], f"omega0.{k}")
            if "background" in spec:
                _number(spec["background"], "omega0.background")
        elif kind == "file":
            _check_keys(spec, "omega0", required=("type", "path"))
        else:
            raise UsageError(f"omega0: unknown type {kind!r}")

    def initial_omega(self, mesh: Mesh | None = None) -> np.ndarray:
        mesh = mesh or self.mesh
        spec = self.omega0_spec
        kind = spec["type"]
        if kind == "constant":
            return np.full(mesh.num_triangles, float(spec["value"]))
        if kind == "annular_band":
            r = np.linalg.norm(mesh.centroid, axis=1)
            out = np.full(mesh.num_triangles, float(spec.get("background",
                                                             0.0)))
            band = (r >= float(spec["r0"])) & (r <= float(spec["r1"]))
            out[band] = float(spec["value"])
            return out
        vals = np.loadtxt(self.base_dir / spec["path"], dtype=np.float64,
                          ndmin=1)
        if vals.shape != (mesh.num_triangles,):
            raise UsageError(
                f"omega0 file: expected {mesh.num_triangles} cell values, "
                f"got {vals.shape}")
        return vals

    def initial_C(self, mesh: Mesh | None = None) -> np.ndarray:
        mesh = mesh or self.mesh
        return np.array([self.C0.get(c.comp, 0.0)
                         for c in mesh.components[1:]])

    def perturbed(self, **delta) -> "Scenario":
        """Copy with additive perturbations: C0={comp: dC}, omega0=dw
        (constant shift), omega_in={comp: dw}."""
        other = Scenario.__new__(Scenario)
        other.__dict__.update(self.__dict__)
        if "C0" in delta:
            c0 = dict(self.C0)
            for cid, dv in delta["C0"].items():
                c0[cid] = c0.get(cid, 0.0) + dv
            other.C0 = c0
        if "omega0" in delta:
            dv = float(delta["omega0"])
            base = self.initial_omega
            other.initial_omega = \
                lambda mesh=None, _b=base, _d=dv: _b(mesh) + _d
        if "omega_in" in delta:
            shifted = dict(self.omega_in)
            for cid, dv in delta["omega_in"].items():
                shifted[cid] = _ShiftedProfile(shifted[cid], float(dv))
            other.omega_in = shifted
        return other


class _ShiftedProfile:
    def __init__(self, base: _Profile, shift: float):
        self.base, self.shift = base, shift

    def __call__(self, x):
        return self.base(x) + self.shift

    def extrema(self):
        lo, hi = self.base.extrema()
        return lo + self.shift, hi + self.shift


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"scenario {path} is not valid JSON: {exc}") \
            from None
    return Scenario(doc, base_dir=path.parent)


# -- edge fluxes --------------------------------------------------------


class FluxAssembler:
    """Precomputed edge-flux structures for one mesh and one g profile."""

    def __init__(self, mesh: Mesh, g_edges: dict[int, np.ndarray],
                 phi_grad: VelocityP0 | None):
        self.mesh = mesh
        self.int_ids = np.nonzero(mesh.interior_edge)[0]
        self.ia = mesh.edges[self.int_ids, 0]
        self.ib = mesh.edges[self.int_ids, 1]
        self.iL = mesh.edge_left[self.int_ids]
        self.iR = mesh.edge_right[self.int_ids]
        self.bcomp = [(c, np.asarray(g_edges.get(c.comp,
                                                 np.zeros(len(c.length)))))
                      for c in mesh.components]
        # prescribed boundary fluxes at unit multiplier
        self.bflux_unit = [g * c.length for c, g in self.bcomp]
        self.pot_int = np.zeros(len(self.int_ids))
        self.div_defect = 0.0
        if phi_grad is not None:
            self.pot_int = self._equilibrated_potential_fluxes(phi_grad)

    def _equilibrated_potential_fluxes(self, phi_grad: VelocityP0
                                       ) -> np.ndarray:
        """Averaged-gradient interior fluxes corrected to make every cell
        exactly divergence free against the prescribed boundary fluxes."""
        mesh = self.mesh
        gv = phi_grad.values
        n = mesh.edge_normal[self.int_ids]
        ln = mesh.edge_length[self.int_ids]
        raw = 0.5 * np.einsum("ed,ed->e", gv[self.iL] + gv[self.iR], n) * ln

        nt = mesh.num_triangles
        resid = np.zeros(nt)
        np.add.at(resid, self.iL, raw)
        np.add.at(resid, self.iR, -raw)
        for (c, _), fb in zip(self.bcomp, self.bflux_unit):
            np.add.at(resid, c.tri, fb)

        ne = len(self.int_ids)
        rows = np.concatenate([self.iL, self.iR])
        cols = np.concatenate([np.arange(ne), np.arange(ne)])
        vals = np.concatenate([np.ones(ne), -np.ones(ne)])
        D = sp.csr_matrix((vals, (rows, cols)), shape=(nt, ne))
        lap = (D @ D.T).tocsr()
        y = fem._pcg(lap, -(resid - resid.mean()), rtol=1e-13,
                     deflate_constant=True)
        corr = D.T @ y
        after = resid + D @ corr
        self.div_defect = float(np.abs(after).max())
        return raw + corr

    def fluxes(self, psi_vals: np.ndarray, mult: float
               ) -> tuple[np.ndarray, list[np.ndarray]]:
        """(interior fluxes out of the left cell, boundary fluxes per
        component) at stream values ``psi_vals`` and multiplier ``mult``."""
        f_int = (psi_vals[self.ia] - psi_vals[self.ib]) \
            + mult * self.pot_int
        f_bdry = [mult * fb for fb in self.bflux_unit]
        return f_int, f_bdry

    def stable_dt(self, u: VelocityP0, f_int: np.ndarray,
                  f_bdry: list[np.ndarray], cfl: float) -> float:
        mesh = self.mesh
        speed = np.linalg.norm(u.values, axis=1)
        with np.errstate(divide="ignore"):
            adv = float(np.min(np.where(speed > 0,
                                        mesh.incircle_diameter
                                        / np.maximum(speed, 1e-300),
                                        np.inf)))
        outflux = np.zeros(mesh.num_triangles)
        np.add.at(outflux, self.iL, np.maximum(f_int, 0.0))
        np.add.at(outflux, self.iR, np.maximum(-f_int, 0.0))
        for (c, _), fb in zip(self.bcomp, f_bdry):
            np.add.at(outflux, c.tri, np.maximum(fb, 0.0))
        with np.errstate(divide="ignore"):
            pos = float(np.min(np.where(outflux > 0,
                                        mesh.tri_area
                                        / np.maximum(outflux, 1e-300),
                                        np.inf)))
        return cfl * min(adv, pos)

    def upwind_rates(self, omega: np.ndarray, f_int: np.ndarray,
                     f_bdry: list[np.ndarray],
                     omega_in_vals: dict[int, float]
                     ) -> tuple[np.ndarray, np.ndarray]:
        """(cell divergence of the upwind vorticity flux, boundary outflux
        rate per component).  d(omega)/dt = -div/area; dC_i/dt = -rate_i."""
        mesh = self.mesh
        up = np.where(f_int >= 0, omega[self.iL], omega[self.iR])
        contrib = f_int * up
        div = np.zeros(mesh.num_triangles)
        np.add.at(div, self.iL, contrib)
        np.add.at(div, self.iR, -contrib)
        rates = np.zeros(len(mesh.components))
        for (c, _), fb in zip(self.bcomp, f_bdry):
            if not len(fb):
                continue
            inval = omega_in_vals.get(c.comp, 0.0)
            upb = np.where(fb >= 0, omega[c.tri], inval)
            cb = fb * upb
            np.add.at(div, c.tri, cb)
            rates[c.comp] = float(cb.sum())
        return div, rates


# -- time integration ---------------------------------------------------


@dataclass
class SimState:
    """One saved snapshot."""

    t: float
    omega: np.ndarray              # (T,) cell vorticity
    C: np.ndarray                  # (m,) inner-component circulations
    B: np.ndarray                  # (ncomp,) cumulative boundary vorticity flux
    assembly: VelocityAssembly
    energy: float
    dt_last: float
    step_count: int

    @property
    def circulations(self) -> np.ndarray:
        """Consistent-flux circulation of every component (row 0 is the
        diagnosed outer circulation)."""
        return self.assembly.circulation_consistent


@dataclass
class Trajectory:
    scenario: Scenario
    mesh: Mesh
    basis: HarmonicBasis
    states: list[SimState]
    g_edges: dict[int, np.ndarray]
    flux: FluxAssembler
    phi: ScalarFieldP1 | None
    max_principle_defect: float
    budget_defect: float
    total_steps: int

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])


def run(scenario: Scenario, basis: HarmonicBasis | None = None) -> Trajectory:
    """Integrate a scenario and return its snapshot trajectory."""
    mesh = scenario.mesh
    basis = basis if basis is not None else HarmonicBasis(mesh)
    if basis.mesh is not mesh:
        raise UsageError("basis was assembled on a different mesh")

    g_edges = scenario.g_edges(mesh)
    has_flow = any(np.any(g != 0.0) for g in g_edges.values())
    phi = phi_grad = None
    if has_flow:
        hodge.validate_sign_condition(mesh, g_edges)
        phi = fem.solve_neumann(basis.op, g_edges)
        phi_grad = fem.gradient(mesh, phi, basis.grads)
    flux = FluxAssembler(mesh, g_edges, phi_grad)

    omega = scenario.initial_omega(mesh)
    if np.any(~np.isfinite(omega)):
        raise PreconditionError("initial vorticity contains non-finite "
                                "values")
    C = scenario.initial_C(mesh)
    ncomp = len(mesh.components)
    B = np.zeros(ncomp)
    inflow_ids = [c.comp for c in mesh.components if c.role == "inflow"]

    bound_lo = float(omega.min(initial=np.inf))
    bound_hi = float(omega.max(initial=-np.inf))
    mp_defect = 0.0
    budget_defect = 0.0

    def assemble(om, circ, t, guess):
        return hodge.reconstruct_velocity(
            basis, VorticityP0(mesh, om), g_edges if has_flow else None,
            circ, multiplier=scenario.multiplier(t), phi=phi,
            phi_grad=phi_grad, psi_guess=guess)

    def energy(asm):
        return 0.5 * float(np.einsum("td,td,t->", asm.u.values,
                                     asm.u.values, mesh.tri_area))

    asm = assemble(omega, C, 0.0, None)
    states = [SimState(t=0.0, omega=omega.copy(), C=C.copy(), B=B.copy(),
                       assembly=asm, energy=energy(asm), dt_last=0.0,
                       step_count=0)]
    t = 0.0
    total_steps = 0
    rk2 = scenario.scheme == "rk2"

    for k in range(1, scenario.snapshots + 1):
        t_next = k * scenario.T / scenario.snapshots
        interval_steps = 0
        while t < t_next:
            interval_steps += 1
            if interval_steps > MAX_STEPS_PER_INTERVAL:
                raise SolverError(
                    f"time step collapsed: more than "
                    f"{MAX_STEPS_PER_INTERVAL} steps in one snapshot "
                    f"interval (t = {t:.6g}, dt = {dt:.3e})")
            mult = asm.multiplier
            f_int, f_bdry = flux.fluxes(asm.psi_total.values, mult)
            dt = flux.stable_dt(asm.u, f_int, f_bdry, scenario.cfl)
            landed = t_next - t <= dt
            dt = min(dt, t_next - t)
            if not (dt > 0 and math.isfinite(dt)):
                raise SolverError(f"non-positive time step {dt!r} at "
                                  f"t = {t:.6g}")

            in_vals = {cid: scenario.omega_in_value(cid, t)
                       for cid in inflow_ids}
            div, rates = flux.upwind_rates(omega, f_int, f_bdry, in_vals)
            mass_before = float(omega @ mesh.tri_area)

            if rk2:
                om1 = omega - dt * div / mesh.tri_area
                C1 = C - dt * rates[1:]
                t1 = t_next if landed else t + dt
                asm1 = assemble(om1, C1, t1, asm.psi0.values)
                f2_int, f2_bdry = flux.fluxes(asm1.psi_total.values,
                                              asm1.multiplier)
                in2 = {cid: scenario.omega_in_value(cid, t1)
                       for cid in inflow_ids}
                div2, rates2 = flux.upwind_rates(om1, f2_int, f2_bdry, in2)
                omega = 0.5 * (omega + om1 - dt * div2 / mesh.tri_area)
                rate_eff = 0.5 * (rates + rates2)
                for v in in2.values():
                    bound_lo = min(bound_lo, v)
                    bound_hi = max(bound_hi, v)
            else:
                omega = omega - dt * div / mesh.tri_area
                rate_eff = rates
            C = C - dt * rate_eff[1:]
            B = B + dt * rate_eff

            for v in in_vals.values():
                bound_lo = min(bound_lo, v)
                bound_hi = max(bound_hi, v)
            mp_defect = max(mp_defect,
                            float(omega.max(initial=-np.inf)) - bound_hi,
                            bound_lo - float(omega.min(initial=np.inf)))
            mass_after = float(omega @ mesh.tri_area)
            bd = abs(mass_after - mass_before + dt * rate_eff.sum())
            scale = max(1.0, abs(mass_before), abs(dt * rate_eff).sum())
            budget_defect = max(budget_defect, bd / scale)

            t = t_next if landed else t + dt
            total_steps += 1
            asm = assemble(omega, C, t, asm.psi0.values)

        states.append(SimState(t=t, omega=omega.copy(), C=C.copy(),
                               B=B.copy(), assembly=asm, energy=energy(asm),
                               dt_last=dt, step_count=total_steps))

    return Trajectory(scenario=scenario, mesh=mesh, basis=basis,
                      states=states, g_edges=g_edges, flux=flux, phi=phi,
                      max_principle_defect=mp_defect,
                      budget_defect=budget_defect, total_steps=total_steps)


# -- diagnostics --------------------------------------------------------


def kelvin_consistency(traj: Trajectory) -> float:
    """Max discrepancy between the transported circulations and the
    boundary-flux accumulators (identical code path; round-off only)."""
    worst = 0.0
    C0 = traj.states[0].C
    for s in traj.states:
        drift = s.C - (C0 - s.B[1:])
        scale = max(1.0, float(np.abs(s.C).max(initial=0.0)))
        worst = max(worst, float(np.abs(drift).max(initial=0.0)) / scale)
    return worst


def weak_residual(traj: Trajectory, phi: ScalarFieldP1,
                  k0: int = 0, k1: int | None = None) -> dict:
    """Residual of the weak transport identity over [t_k0, t_k1]:

        int_t int_Omega omega u . grad(phi)
        = [int_Omega omega phi]_{t_k0}^{t_k1} + int_t int_Gamma omega phi g.

    When the test function is constant on every boundary component the
    boundary integral is taken from the exact per-step accumulators;
    otherwise it is a trapezoid over the snapshots.
    """
    if k1 is None:
        k1 = len(traj.states) - 1
    mesh = traj.mesh
    states = traj.states[k0:k1 + 1]
    times = np.array([s.t for s in states])
    grads = traj.basis.grads
    gphi = fem.gradient(mesh, phi, grads).values

    vol = np.array([float(np.einsum("t,td,td,t->", s.omega,
                                    s.assembly.u.values, gphi,
                                    mesh.tri_area))
                    for s in states])
    vol_int = float(np.trapezoid(vol, times))

    phi_bar = phi.values[mesh.triangles].mean(axis=1)

    def mass(s):
        return float((s.omega * phi_bar) @ mesh.tri_area)

    jump = mass(states[-1]) - mass(states[0])

    comp_const = []
    is_const = True
    for c in mesh.components:
        tv = phi.values[c.edges[:, 0]]
        if np.ptp(phi.values[np.unique(c.edges)]) > 1e-12 * max(
                1.0, float(np.abs(phi.values).max())):
            is_const = False
            break
        comp_const.append(float(tv[0]))

    if is_const:
        bdry = sum(cv * (states[-1].B[c.comp] - states[0].B[c.comp])
                   for cv, c in zip(comp_const, mesh.components))
    else:
        rows = []
        for s in states:
            tot = 0.0
            mult = s.assembly.multiplier
            for (c, g) in traj.flux.bcomp:
                fb = mult * g * c.length
                inval = traj.scenario.omega_in_value(c.comp, s.t) \
                    if c.role == "inflow" else 0.0
                om_tr = np.where(fb >= 0, s.omega[c.tri], inval)
                phim = 0.5 * (phi.values[c.edges[:, 0]]
                              + phi.values[c.edges[:, 1]])
                tot += float(np.sum(om_tr * phim * fb))
            rows.append(tot)
        bdry = float(np.trapezoid(np.array(rows), times))

    return {"volume": vol_int, "jump": jump, "boundary": bdry,
            "residual": vol_int - jump - bdry,
            "exact_boundary": is_const}


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Snapshot table: time, per-component circulations (component 0 is
    the diagnosed outer value), vorticity mass and range, kinetic energy,
    last step size.  Full 17-digit precision."""
    ncomp = len(traj.mesh.components)
    cols = ["t"] + [f"C_{c}" for c in range(ncomp)] \
        + ["vort_mass", "vort_min", "vort_max", "energy", "dt"]
    lines = [",".join(cols)]
    area = traj.mesh.tri_area
    for s in traj.states:
        circ = s.circulations
        row = [s.t] + [circ[c] for c in range(ncomp)] \
            + [float(s.omega @ area), float(s.omega.min()),
               float(s.omega.max()), s.energy, s.dt_last]
        lines.append(",".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
