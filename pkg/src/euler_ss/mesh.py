"""Unstructured triangle meshes of multiply connected planar domains.

Conventions used throughout the package:

* triangles are stored counterclockwise (positive signed area);
* the boundary splits into closed loops ("components"), component 0 is the
  outer loop; every other component bounds a hole;
* boundary edges are directed so the fluid lies on the left; the outer loop
  then runs counterclockwise and hole loops run clockwise;
* the unit normal of a directed edge (a -> b) is the tangent rotated by -90
  degrees, which points out of the fluid everywhere (into the holes on inner
  components);
* each boundary component carries a role: "wall", "inflow" or "outflow".

Text format (one mesh per file)::

    V T B K
    x y            (V vertex lines)
    i j k          (T triangle lines, 0-based, counterclockwise)
    i j comp_id    (B boundary edge lines)
    comp_id role   (K component role lines)

Circles produced by the annulus generator remember their radii so midpoint
refinement can project new boundary vertices back onto the circle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

ROLES = ("wall", "inflow", "outflow")


@dataclass
class BoundaryComponent:
    """One closed boundary loop with its directed edge data."""

    comp: int
    role: str
    edges: np.ndarray        # (E, 2) directed vertex pairs, loop order
    tri: np.ndarray          # (E,) adjacent triangle per edge
    edge_ids: np.ndarray     # (E,) indices into the mesh-wide edge table
    length: np.ndarray       # (E,) edge lengths
    midpoint: np.ndarray     # (E, 2)
    tangent: np.ndarray      # (E, 2) unit, fluid on the left
    normal: np.ndarray       # (E, 2) unit, out of the fluid

    @property
    def nodes(self) -> np.ndarray:
        """Loop vertices in traversal order (first vertex of each edge)."""
        return self.edges[:, 0]

    @property
    def total_length(self) -> float:
        return float(self.length.sum())


class Mesh:
    """Triangle mesh with validated boundary structure and edge tables."""

    def __init__(self, vertices, triangles, boundary_edges, roles,
                 radii=None, _validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise UsageError("vertices must be an (V, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise UsageError("triangles must be a (T, 3) array")
        self.radii = dict(radii) if radii else None

        self._build_triangle_data(_validate)
        self._build_edge_table()
        self._build_components(np.asarray(boundary_edges, dtype=np.int64),
                               dict(roles), _validate)
        if _validate:
            self._validate_global()

    # -- construction ---------------------------------------------------

    def _build_triangle_data(self, validate: bool) -> None:
        v = self.vertices[self.triangles]          # (T, 3, 2)
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        signed = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if validate:
            bad = np.nonzero(signed <= 0.0)[0]
            if bad.size:
                raise UsageError(
                    f"inverted triangle {int(bad[0])} "
                    f"(signed area {signed[bad[0]]:.3e}; must be counterclockwise)")
        self.tri_area = signed
        self.centroid = v.mean(axis=1)
        l0 = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
        l1 = np.linalg.norm(v[:, 0] - v[:, 2], axis=1)
        l2 = np.linalg.norm(d1, axis=1)
        # incircle diameter 4*area / perimeter, used by the CFL cap
        self.incircle_diameter = 4.0 * signed / (l0 + l1 + l2)

    def _build_edge_table(self) -> None:
        t = self.triangles
        # directed edges (a -> b) as they appear counterclockwise in each
        # triangle; the triangle interior lies on the left of each
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        owner = np.concatenate([np.arange(len(t))] * 3)
        key = {}
        edges = []
        edge_left = []
        edge_right = []
        for (a, b), tri in zip(directed.tolist(), owner.tolist()):
            k = (b, a)
            if k in key:
                e = key[k]
                if edge_right[e] != -1:
                    raise UsageError(
                        f"edge ({b}, {a}) shared by more than two triangles")
                edge_right[e] = tri
            else:
                if (a, b) in key:
                    raise UsageError(
                        f"edge ({a}, {b}) traversed twice in the same direction "
                        "(inconsistent orientation)")
                key[(a, b)] = len(edges)
                edges.append((a, b))
                edge_left.append(tri)
                edge_right.append(-1)
        self.edges = np.asarray(edges, dtype=np.int64)          # directed a->b
        self.edge_left = np.asarray(edge_left, dtype=np.int64)   # fluid left of a->b
        self.edge_right = np.asarray(edge_right, dtype=np.int64)  # -1 on boundary
        vec = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        self.edge_length = np.linalg.norm(vec, axis=1)
        # normal = tangent rotated -90 degrees: points right of a->b, i.e.
        # away from edge_left and out of the domain on boundary edges
        self.edge_normal = np.empty_like(vec)
        self.edge_normal[:, 0] = vec[:, 1]
        self.edge_normal[:, 1] = -vec[:, 0]
        self.edge_normal /= self.edge_length[:, None]
        self.interior_edge = self.edge_right >= 0
        self._edge_index = {(int(a), int(b)): i
                            for i, (a, b) in enumerate(self.edges)}

    def _build_components(self, bedges: np.ndarray, roles: dict,
                          validate: bool) -> None:
        boundary_ids = np.nonzero(~self.interior_edge)[0]
        derived = {}
        for e in boundary_ids:
            a, b = (int(x) for x in self.edges[e])
            derived[(a, b)] = int(e)

        comp_of = {}
        bedges = bedges.reshape(-1, 3)
        if len(bedges) == 0 and derived:
            raise UsageError("mesh has boundary edges but none were declared")
        for i, j, c in bedges.tolist():
            i, j, c = int(i), int(j), int(c)
            if (i, j) in derived:
                pair = (i, j)
            elif (j, i) in derived:
                pair = (j, i)   # accept either order, store fluid-left
            else:
                raise UsageError(f"orphan boundary edge ({i}, {j})")
            if pair in comp_of:
                raise UsageError(f"boundary edge {pair} declared twice")
            comp_of[pair] = c
        missing = set(derived) - set(comp_of)
        if missing:
            pair = sorted(missing)[0]
            raise UsageError(f"undeclared boundary edge {pair}")

        comp_ids = sorted(set(comp_of.values()))
        if comp_ids != list(range(len(comp_ids))):
            raise UsageError(
                f"component ids must be 0..{len(comp_ids) - 1}, got {comp_ids}")
        for c in comp_ids:
            if c not in roles:
                raise UsageError(f"missing role for component {c}")
            if roles[c] not in ROLES:
                raise UsageError(
                    f"component {c}: unknown role {roles[c]!r} "
                    f"(expected one of {ROLES})")

        self.components: list[BoundaryComponent] = []
        for c in comp_ids:
            pairs = [p for p, cc in comp_of.items() if cc == c]
            succ = {}
            for a, b in pairs:
                if a in succ:
                    raise UsageError(
                        f"open boundary loop, component {c} "
                        f"(vertex {a} has two outgoing edges)")
                succ[a] = b
            start = pairs[0][0]
            loop = []
            node = start
            for _ in range(len(pairs)):
                if node not in succ:
                    raise UsageError(f"open boundary loop, component {c}")
                nxt = succ.pop(node)
                loop.append((node, nxt))
                node = nxt
            if node != start or succ:
                raise UsageError(f"open boundary loop, component {c}")
            edges = np.asarray(loop, dtype=np.int64)
            ids = np.asarray([derived[(int(a), int(b))] for a, b in loop],
                             dtype=np.int64)
            vec = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
            length = np.linalg.norm(vec, axis=1)
            tangent = vec / length[:, None]
            normal = np.empty_like(tangent)
            normal[:, 0] = tangent[:, 1]
            normal[:, 1] = -tangent[:, 0]
            self.components.append(BoundaryComponent(
                comp=c, role=roles[c], edges=edges, tri=self.edge_left[ids],
                edge_ids=ids, length=length,
                midpoint=0.5 * (self.vertices[edges[:, 0]]
                                + self.vertices[edges[:, 1]]),
                tangent=tangent, normal=normal))

        if validate and self.components:
            # component 0 must be the outer loop: with fluid on the left it
            # is the unique loop of positive signed area
            areas = [self._loop_area(comp) for comp in self.components]
            outer = int(np.argmax(areas))
            if areas[outer] <= 0:
                raise UsageError("no outer boundary loop found")
            if outer != 0:
                raise UsageError(
                    f"component 0 must be the outer boundary "
                    f"(outer loop is component {outer})")
            for comp, a in zip(self.components[1:], areas[1:]):
                if a >= 0:
                    raise UsageError(
                        f"component {comp.comp} is not a hole loop "
                        "(clockwise traversal expected)")

    def _loop_area(self, comp: BoundaryComponent) -> float:
        p = self.vertices[comp.edges[:, 0]]
        q = self.vertices[comp.edges[:, 1]]
        return float(0.5 * np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))

    def _validate_global(self) -> None:
        n_holes = max(len(self.components) - 1, 0)
        chi = len(self.vertices) - len(self.edges) + len(self.triangles)
        if chi != 1 - n_holes:
            raise UsageError(
                f"Euler characteristic {chi} does not match "
                f"{1 - n_holes} for {n_holes} hole(s)")
        loop_total = sum(self._loop_area(c) for c in self.components)
        tri_total = float(self.tri_area.sum())
        if abs(loop_total - tri_total) > 1e-12 * max(tri_total, 1.0):
            raise UsageError(
                f"triangle area {tri_total!r} does not match "
                f"boundary loop area {loop_total!r}")

    # -- queries --------------------------------------------------------

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @property
    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges) + len(self.triangles)

    def component(self, comp: int) -> BoundaryComponent:
        try:
            return self.components[comp]
        except IndexError:
            raise UsageError(f"no boundary component {comp}") from None

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Sorted array of all vertices lying on the boundary."""
        if not self.components:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([c.nodes for c in self.components]))

    def component_nodes(self, comp: int) -> np.ndarray:
        return np.unique(self.components[comp].nodes)

    def roles(self) -> dict[int, str]:
        return {c.comp: c.role for c in self.components}

    def inflow_components(self) -> list[int]:
        return [c.comp for c in self.components if c.role == "inflow"]

    def outflow_components(self) -> list[int]:
        return [c.comp for c in self.components if c.role == "outflow"]


# -- generators ---------------------------------------------------------


def generate_annulus(r0: float, r1: float, nr: int, ntheta: int,
                     roles: tuple[str, str] = ("wall", "wall")) -> Mesh:
    """Structured triangulation of the annulus r0 < |x| < r1.

    nr radial layers and ntheta sectors give (nr+1)*ntheta vertices and
    2*nr*ntheta triangles.  Component 0 is the outer circle, component 1 the
    inner circle; ``roles`` assigns their roles in that order.  The mesh
    remembers both radii so refinement re-projects boundary midpoints.
    """
    if r0 <= 0 or r1 <= r0:
        raise UsageError(f"need 0 < r0 < r1, got r0={r0}, r1={r1}")
    if nr < 1 or ntheta < 3:
        raise UsageError(f"need nr >= 1 and ntheta >= 3, got {nr}, {ntheta}")
    radii = np.linspace(r0, r1, nr + 1)
    theta = 2.0 * np.pi * np.arange(ntheta) / ntheta
    vx = np.outer(radii, np.cos(theta)).ravel()
    vy = np.outer(radii, np.sin(theta)).ravel()
    vertices = np.column_stack([vx, vy])

    def vid(k, j):
        return k * ntheta + (j % ntheta)

    tris = []
    for k in range(nr):
        for j in range(ntheta):
            a = vid(k, j)
            b = vid(k + 1, j)
            c = vid(k + 1, j + 1)
            d = vid(k, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))

    bedges = []
    # outer circle, counterclockwise (fluid on the left)
    for j in range(ntheta):
        bedges.append((vid(nr, j), vid(nr, j + 1), 0))
    # inner circle, clockwise (fluid on the left)
    for j in range(ntheta):
        bedges.append((vid(0, j + 1), vid(0, j), 1))

    return Mesh(vertices, np.asarray(tris), np.asarray(bedges),
                {0: roles[0], 1: roles[1]}, radii={0: r1, 1: r0})


def uniform_refine(mesh: Mesh) -> Mesh:
    """Midpoint refinement: every triangle splits into four.

    New boundary vertices are projected onto the generating circle when the
    mesh carries radii metadata; otherwise they stay at chord midpoints.
    """
    nv = mesh.num_vertices
    mid_id = nv + np.arange(len(mesh.edges))
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]]
                  + mesh.vertices[mesh.edges[:, 1]])

    comp_of_edge = {}
    for comp in mesh.components:
        for e in comp.edge_ids:
            comp_of_edge[int(e)] = comp.comp
    if mesh.radii:
        for e, c in comp_of_edge.items():
            r = mesh.radii.get(c)
            if r is not None:
                mids[e] *= r / np.linalg.norm(mids[e])

    vertices = np.vstack([mesh.vertices, mids])

    def eid(a, b):
        if (a, b) in mesh._edge_index:
            return mesh._edge_index[(a, b)]
        return mesh._edge_index[(b, a)]

    tris = np.empty((4 * mesh.num_triangles, 3), dtype=np.int64)
    for t, (a, b, c) in enumerate(mesh.triangles.tolist()):
        mab = mid_id[eid(a, b)]
        mbc = mid_id[eid(b, c)]
        mca = mid_id[eid(c, a)]
        tris[4 * t + 0] = (a, mab, mca)
        tris[4 * t + 1] = (mab, b, mbc)
        tris[4 * t + 2] = (mca, mbc, c)
        tris[4 * t + 3] = (mab, mbc, mca)

    bedges = []
    for comp in mesh.components:
        for (a, b), e in zip(comp.edges.tolist(), comp.edge_ids.tolist()):
            m = int(mid_id[e])
            bedges.append((a, m, comp.comp))
            bedges.append((m, b, comp.comp))

    return Mesh(vertices, tris, np.asarray(bedges), mesh.roles(),
                radii=mesh.radii)


# -- text format --------------------------------------------------------


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"{mesh.num_vertices} {mesh.num_triangles} "
             f"{sum(len(c.edges) for c in mesh.components)} "
             f"{len(mesh.components)}"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    for i, j, k in mesh.triangles:
        lines.append(f"{i} {j} {k}")
    for comp in mesh.components:
        for a, b in comp.edges:
            lines.append(f"{a} {b} {comp.comp}")
    for comp in mesh.components:
        lines.append(f"{comp.comp} {comp.role}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    try:
        with open(path) as f:
            raw = f.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read mesh file {path}: {exc}") from None

    def fail(lineno, msg):
        raise UsageError(f"{path}: line {lineno}: {msg}")

    if not raw:
        fail(1, "empty file")
    head = raw[0].split()
    if len(head) != 4:
        fail(1, f"expected header 'V T B K', got {raw[0]!r}")
    try:
        nv, nt, nb, nk = (int(x) for x in head)
    except ValueError:
        fail(1, f"non-integer header field in {raw[0]!r}")
    need = 1 + nv + nt + nb + nk
    body = [ln for ln in raw if ln.strip()]
    if len(body) != need:
        fail(len(raw), f"expected {need} lines, found {len(body)} non-empty")

    vertices = np.empty((nv, 2))
    for i in range(nv):
        ln = body[1 + i].split()
        if len(ln) != 2:
            fail(2 + i, f"vertex line needs 'x y', got {body[1 + i]!r}")
        try:
            vertices[i] = [float(ln[0]), float(ln[1])]
        except ValueError:
            fail(2 + i, f"bad vertex coordinates {body[1 + i]!r}")

    triangles = np.empty((nt, 3), dtype=np.int64)
    for i in range(nt):
        lineno = 1 + nv + i
        ln = body[lineno].split()
        if len(ln) != 3:
            fail(lineno + 1, f"triangle line needs 'i j k', got {body[lineno]!r}")
        try:
            triangles[i] = [int(x) for x in ln]
        except ValueError:
            fail(lineno + 1, f"bad triangle indices {body[lineno]!r}")
        if triangles[i].min() < 0 or triangles[i].max() >= nv:
            fail(lineno + 1, f"triangle index out of range in {body[lineno]!r}")

    bedges = np.empty((nb, 3), dtype=np.int64)
    for i in range(nb):
        lineno = 1 + nv + nt + i
        ln = body[lineno].split()
        if len(ln) != 3:
            fail(lineno + 1,
                 f"boundary line needs 'i j comp', got {body[lineno]!r}")
        try:
            bedges[i] = [int(x) for x in ln]
        except ValueError:
            fail(lineno + 1, f"bad boundary edge {body[lineno]!r}")

    roles = {}
    for i in range(nk):
        lineno = 1 + nv + nt + nb + i
        ln = body[lineno].split()
        if len(ln) != 2:
            fail(lineno + 1,
                 f"component line needs 'comp role', got {body[lineno]!r}")
        try:
            roles[int(ln[0])] = ln[1]
        except ValueError:
            fail(lineno + 1, f"bad component id {body[lineno]!r}")

    return Mesh(vertices, triangles, bedges, roles)
