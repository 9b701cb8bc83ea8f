"""Base-manifold meshes for the benchmark cases.

A mesh is a structured lattice of quadrilateral cells in a (u, v) parameter
rectangle, pushed onto a surface chart. Geometry (tangents, unit normal,
shape operator, area/line weights) is evaluated analytically from the chart
at quadrature points, so flat cases carry exactly zero curvature.

Cases:
  straight_channel   flat rectangle, optional solid design band along the top
  bending_channel    flat unit design square plus inlet/outlet channel stubs
  four_terminal      flat unit design square plus two inlet and two outlet stubs
  square_sphere(t)   unit-area family from a flat square (t=0) to a full
                     sphere (t=1); intermediate t is a spherical cap reached
                     through a smooth square-to-disk map and an equal-area
                     azimuthal wrap, so total area is exactly 1 for every t
  cylinder_strip(t)  isometric family from a cut cylinder (t=0) to a flat
                     strip (t=1); area exactly conserved
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem

KIND_INLET = 0
KIND_OPEN = 1
KIND_WALL = 2
KIND_NAMES = {KIND_INLET: "inlet", KIND_OPEN: "open", KIND_WALL: "wall"}

DOMAIN_DESIGN = 0
DOMAIN_FLUID = 1


class MeshError(ValueError):
    pass


# ---------------------------------------------------------------------------
# surface charts
# ---------------------------------------------------------------------------

class SurfaceChart:
    """Parameterization (u, v) -> R^3 with analytic derivatives."""

    def position(self, u, v):
        raise NotImplementedError

    def tangents(self, u, v):
        raise NotImplementedError

    def normal(self, u, v):
        raise NotImplementedError

    def shape_operator(self, u, v):
        """Matrix of tangential gradients of the normal, (..., 3, 3)."""
        raise NotImplementedError


class PlaneChart(SurfaceChart):
    def position(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        return np.stack([u, v, np.zeros_like(u)], axis=-1)

    def tangents(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        z = np.zeros_like(u)
        o = np.ones_like(u)
        au = np.stack([o, z, z], axis=-1)
        av = np.stack([z, o, z], axis=-1)
        return au, av

    def normal(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        z = np.zeros_like(u)
        return np.stack([z, z, np.ones_like(u)], axis=-1)

    def shape_operator(self, u, v):
        u = np.asarray(u, float)
        shp = np.broadcast_shapes(u.shape, np.shape(v))
        return np.zeros(shp + (3, 3))


class SphereCapChart(SurfaceChart):
    """Unit-area spherical cap covering fraction t of its sphere.

    The unit square is taken to centered coordinates, mapped to the disk of
    radius 1/sqrt(pi) by the smooth elliptical square-to-disk map, then
    wrapped onto the sphere of radius R = 1/(2 sqrt(pi t)) by the inverse
    equal-area azimuthal projection. The wrap preserves area pointwise, so
    the total area equals the disk area = 1 for every t; t=1 closes the
    full sphere (the square boundary collapses onto the far pole). The
    elliptical map is analytic; its jacobian vanishes only at the four
    square corners.
    """

    def __init__(self, t):
        if not 0.0 < t <= 1.0:
            raise MeshError(f"sphere cap fraction must be in (0, 1], got {t}")
        self.t = float(t)
        self.disk_radius = 1.0 / np.sqrt(np.pi)
        self.radius = 1.0 / (2.0 * np.sqrt(np.pi * self.t))
        self.center = np.array([0.0, 0.0, -self.radius])

    # square [0,1]^2 -> disk of radius disk_radius (elliptical map)
    def _disk(self, u, v):
        a = 2.0 * (np.asarray(u, float) - 0.5)
        b = 2.0 * (np.asarray(v, float) - 0.5)
        s = self.disk_radius
        fa = np.sqrt(np.maximum(1.0 - 0.5 * b * b, 1e-300))
        fb = np.sqrt(np.maximum(1.0 - 0.5 * a * a, 1e-300))
        qx = s * a * fa
        qy = s * b * fb
        dqx_du = 2.0 * s * fa
        dqx_dv = 2.0 * s * a * (-0.5 * b) / fa
        dqy_du = 2.0 * s * b * (-0.5 * a) / fb
        dqy_dv = 2.0 * s * fb
        return qx, qy, dqx_du, dqx_dv, dqy_du, dqy_dv

    def _wrap(self, qx, qy):
        """Equal-area wrap of the disk onto the sphere, apex at the origin."""
        R = self.radius
        w = qx * qx + qy * qy
        g = np.sqrt(np.maximum(1.0 - w / (4.0 * R * R), 0.0))
        x = qx * g
        y = qy * g
        z = -w / (2.0 * R)
        return x, y, z, g

    def position(self, u, v):
        qx, qy, *_ = self._disk(u, v)
        x, y, z, _ = self._wrap(qx, qy)
        return np.stack(np.broadcast_arrays(x, y, z), axis=-1)

    def tangents(self, u, v):
        qx, qy, dqx_du, dqx_dv, dqy_du, dqy_dv = self._disk(u, v)
        R = self.radius
        w = qx * qx + qy * qy
        g = np.sqrt(np.maximum(1.0 - w / (4.0 * R * R), 1e-300))
        dg_dw = -1.0 / (8.0 * R * R * g)
        # X = (qx g, qy g, -w/(2R)) with w = |q|^2
        def tangent(dqx, dqy):
            dw = 2.0 * (qx * dqx + qy * dqy)
            return np.stack(
                np.broadcast_arrays(
                    dqx * g + qx * dg_dw * dw,
                    dqy * g + qy * dg_dw * dw,
                    -dw / (2.0 * R),
                ),
                axis=-1,
            )

        return tangent(dqx_du, dqy_du), tangent(dqx_dv, dqy_dv)

    def normal(self, u, v):
        x = self.position(u, v)
        return (x - self.center) / self.radius

    def shape_operator(self, u, v):
        n = self.normal(u, v)
        eye = np.eye(3)
        return (eye - n[..., :, None] * n[..., None, :]) / self.radius


class BentStripChart(SurfaceChart):
    """Isometric family from a cut cylinder (t=0) to a flat strip (t=1).

    The strip of width W wraps through an arc angle 2*pi*(1-t) at radius
    W / angle; arc length is preserved exactly, so the area is W*H for
    every t. The seam stays cut (two wall boundaries) at t=0.
    """

    _FLAT_ANGLE = 1e-9

    def __init__(self, t, width=1.0, height=1.0):
        if not 0.0 <= t <= 1.0:
            raise MeshError(f"strip parameter must be in [0, 1], got {t}")
        self.t = float(t)
        self.width = float(width)
        self.height = float(height)
        self.angle = 2.0 * np.pi * (1.0 - self.t)
        self.flat = self.angle < self._FLAT_ANGLE
        self.radius = np.inf if self.flat else self.width / self.angle

    def _phi(self, u):
        return self.angle * (np.asarray(u, float) - 0.5)

    def position(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        y = self.height * v
        if self.flat:
            s = self.width * (u - 0.5)
            return np.stack([s, y, np.zeros_like(s)], axis=-1)
        phi = self._phi(u)
        R = self.radius
        return np.stack([R * np.sin(phi), y, R * (1.0 - np.cos(phi))], axis=-1)

    def tangents(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        z = np.zeros_like(u)
        av = np.stack([z, self.height * np.ones_like(u), z], axis=-1)
        if self.flat:
            au = np.stack([self.width * np.ones_like(u), z, z], axis=-1)
            return au, av
        phi = self._phi(u)
        au = self.width * np.stack([np.cos(phi), z, np.sin(phi)], axis=-1)
        return au, av

    def normal(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        z = np.zeros_like(u)
        if self.flat:
            return np.stack([z, z, np.ones_like(u)], axis=-1)
        phi = self._phi(u)
        return np.stack([-np.sin(phi), z, np.cos(phi)], axis=-1)

    def shape_operator(self, u, v):
        u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
        if self.flat:
            return np.zeros(u.shape + (3, 3))
        phi = self._phi(u)
        that = np.stack([np.cos(phi), np.zeros_like(u), np.sin(phi)], axis=-1)
        return -(that[..., :, None] * that[..., None, :]) / self.radius


# ---------------------------------------------------------------------------
# case specification
# ---------------------------------------------------------------------------

CASE_IDS = (
    "straight_channel",
    "bending_channel",
    "four_terminal",
    "square_sphere",
    "cylinder_strip",
)

MIN_RESOLUTION = 8


@dataclass
class CaseSpec:
    """Benchmark case: geometry family, resolution, inlet speed scale.

    ``resolution`` counts quads per unit length of the design square (or per
    strip width). ``params`` holds documented geometric defaults that may be
    overridden from the run configuration.
    """

    case_id: str
    resolution: int
    U0: float = 1.0
    t: float = 0.0
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.case_id not in CASE_IDS:
            raise MeshError(f"unknown case_id {self.case_id!r}")
        if self.resolution < MIN_RESOLUTION:
            raise MeshError(
                f"resolution {self.resolution} below minimum {MIN_RESOLUTION}"
            )
        if not 0.0 <= self.t <= 1.0:
            raise MeshError(f"deformation parameter t={self.t} outside [0, 1]")
        if self.U0 < 0.0:
            raise MeshError("U0 must be nonnegative")


@dataclass
class BoundarySegment:
    name: str
    kind: int
    edges: np.ndarray          # edge indices, chain-ordered
    length: float
    node_ids: np.ndarray       # Q2 node ids along the chain
    node_arclength: np.ndarray # cumulative arclength per node


class ElementSpaces:
    """Nested Q1/Q2 node sets of a quad mesh (Taylor-Hood pairing)."""

    def __init__(self, mesh):
        self.n_linear = mesh.n_q1
        self.n_quadratic = mesh.n_q2
        self.linear_in_quadratic = mesh.q1_to_q2
        self.quads_linear = mesh.quads_q1
        self.quads_quadratic = mesh.quads_q2


class BaseManifoldMesh:
    """Discretized base manifold with tagged boundary and quadrature data.

    Immutable once built; all arrays are laid out per element / per
    quadrature point for vectorized assembly. Q1 nodes are a subset of the
    Q2 nodes (``q1_to_q2`` maps the numbering).
    """

    def __init__(self):
        self.case = None
        self.chart = None
        # nodes
        self.nodes_q2 = None      # (n_q2, 3)
        self.node_uv = None       # (n_q2, 2) chart parameters
        self.node_normal = None   # (n_q2, 3)
        self.n_q2 = 0
        self.n_q1 = 0
        self.q1_to_q2 = None      # (n_q1,) int
        # elements
        self.quads_q2 = None      # (ne, 9) int
        self.quads_q1 = None      # (ne, 4) int
        self.elem_domain = None   # (ne,) 0 design / 1 fluid
        self.elem_param_rect = None  # (ne, 4): u0, v0, du, dv
        # volume quadrature
        self.w = None             # (ne, 9) area weights (dSigma)
        self.gradN2 = None        # (ne, 9, 9, 3)
        self.gradN1 = None        # (ne, 9, 4, 3)
        self.normal = None        # (ne, 9, 3)
        self.shape_op = None      # (ne, 9, 3, 3)
        self.qp_uv = None         # (ne, 9, 2)
        # boundary quadrature (per edge, 3 Gauss points)
        self.be_elem = None       # (nE,)
        self.be_kind = None       # (nE,)
        self.be_segment = None    # (nE,)
        self.be_w = None          # (nE, 3)
        self.be_tau = None        # (nE, 3, 3)
        self.be_ntau = None       # (nE, 3, 3) outward conormal
        self.be_normal = None     # (nE, 3, 3)
        self.be_shape_op = None   # (nE, 3, 3, 3)
        self.be_N2 = None         # (nE, 3, 9)
        self.be_gradN2 = None     # (nE, 3, 9, 3)
        self.be_N1 = None         # (nE, 3, 4)
        self.be_nodes = None      # (nE, 3) q2 node ids along edge
        self.be_length = None     # (nE,)
        self.segments = []        # list[BoundarySegment]
        # derived boundary node data
        self.inlet_nodes = None   # (k,) q2 ids
        self.inlet_zeta = None    # (k,) normalized arclength in its segment
        self.inlet_dir = None     # (k, 3) inward unit conormal
        self.wall_nodes = None    # (k,) q2 ids
        self.pin_points = []      # list[(q1 node id, pressure value)]

    # -- convenience -------------------------------------------------------

    @property
    def n_elems(self):
        return self.quads_q2.shape[0]

    @property
    def spaces(self):
        return ElementSpaces(self)

    @property
    def nodes_q1(self):
        return self.nodes_q2[self.q1_to_q2]

    def area(self):
        return float(self.w.sum())

    def boundary_length(self):
        return float(self.be_w.sum())

    def q1_nodes_of_kind(self, kinds):
        """Q1 node ids (Q1 numbering) on boundary edges of the given kinds."""
        mask = np.isin(self.be_kind, list(kinds))
        q2_ids = np.unique(self.be_nodes[mask][:, [0, 2]])
        lut = -np.ones(self.n_q2, dtype=np.int64)
        lut[self.q1_to_q2] = np.arange(self.n_q1)
        ids = lut[q2_ids]
        return np.sort(ids[ids >= 0])

    def q2_nodes_of_kind(self, kinds):
        mask = np.isin(self.be_kind, list(kinds))
        return np.unique(self.be_nodes[mask])

    def design_q1_mask(self):
        """True for Q1 nodes carried by at least one design-domain element."""
        mask = np.zeros(self.n_q1, dtype=bool)
        des = self.elem_domain == DOMAIN_DESIGN
        mask[np.unique(self.quads_q1[des])] = True
        return mask

    def interpolate_q2(self, nodal, table=None):
        """Nodal Q2 field -> values at volume quadrature points (ne, 9)."""
        n2 = fem.VOLUME_TABLES.n2 if table is None else table
        return np.einsum("qa,ea->eq", n2, nodal[self.quads_q2])

    def interpolate_q1(self, nodal, table=None):
        n1 = fem.VOLUME_TABLES.n1 if table is None else table
        return np.einsum("qa,ea->eq", n1, nodal[self.quads_q1])

    def gradient_q2(self, nodal):
        """Nodal Q2 field -> tangential gradient at quadrature points (ne, 9, 3)."""
        return np.einsum("eqad,ea->eqd", self.gradN2, nodal[self.quads_q2])

    def gradient_q1(self, nodal):
        return np.einsum("eqad,ea->eqd", self.gradN1, nodal[self.quads_q1])

    # VTK-facing views: each quad splits into 4 bilinear subquads on Q2 nodes
    def vtk_cells(self):
        q = self.quads_q2
        sub = []
        for corners in ((0, 1, 4, 3), (1, 2, 5, 4), (3, 4, 7, 6), (4, 5, 8, 7)):
            sub.append(q[:, list(corners)])
        return np.concatenate(sub, axis=0)


# ---------------------------------------------------------------------------
# structured builder
# ---------------------------------------------------------------------------

_SIDE_OUTWARD = {"S": (0, -1), "E": (1, 0), "N": (0, 1), "W": (-1, 0)}


def _build_structured(chart, u_range, v_range, ncu, ncv, cell_active, tag_fn,
                      domain_fn):
    """Assemble a BaseManifoldMesh from a masked lattice on a chart.

    cell_active: (ncv, ncu) bool; tag_fn(mid_u, mid_v, outward) -> kind;
    domain_fn(center_u, center_v) -> DOMAIN_DESIGN | DOMAIN_FLUID.
    """
    u0, u1 = u_range
    v0, v1 = v_range
    hu = (u1 - u0) / ncu
    hv = (v1 - v0) / ncv
    mesh = BaseManifoldMesh()
    mesh.chart = chart

    active = np.argwhere(cell_active)  # rows (cy, cx)
    if len(active) == 0:
        raise MeshError("case mask selects no cells")

    # lattice points (2ncu+1) x (2ncv+1); active points from active cells
    npx, npy = 2 * ncu + 1, 2 * ncv + 1
    point_active = np.zeros((npy, npx), dtype=bool)
    for cy, cx in active:
        point_active[2 * cy:2 * cy + 3, 2 * cx:2 * cx + 3] = True
    pts = np.argwhere(point_active)  # (n, 2) rows (ly, lx), lex order
    point_id = -np.ones((npy, npx), dtype=np.int64)
    point_id[point_active] = np.arange(len(pts))
    mesh.n_q2 = len(pts)

    lat_u = u0 + pts[:, 1] * (hu / 2.0)
    lat_v = v0 + pts[:, 0] * (hv / 2.0)
    mesh.nodes_q2 = chart.position(lat_u, lat_v)
    mesh.node_uv = np.stack([lat_u, lat_v], axis=-1)
    mesh.node_normal = chart.normal(lat_u, lat_v)

    q1_mask = (pts[:, 0] % 2 == 0) & (pts[:, 1] % 2 == 0)
    mesh.q1_to_q2 = np.flatnonzero(q1_mask)
    mesh.n_q1 = len(mesh.q1_to_q2)
    q1_lut = -np.ones(mesh.n_q2, dtype=np.int64)
    q1_lut[mesh.q1_to_q2] = np.arange(mesh.n_q1)

    ne = len(active)
    quads_q2 = np.empty((ne, 9), dtype=np.int64)
    quads_q1 = np.empty((ne, 4), dtype=np.int64)
    rects = np.empty((ne, 4))
    domain = np.empty(ne, dtype=np.uint8)
    for e, (cy, cx) in enumerate(active):
        lx, ly = 2 * cx, 2 * cy
        ids = [point_id[ly + j, lx + i] for j in range(3) for i in range(3)]
        quads_q2[e] = ids
        quads_q1[e] = q1_lut[[ids[0], ids[2], ids[6], ids[8]]]
        uc0 = u0 + cx * hu
        vc0 = v0 + cy * hv
        rects[e] = (uc0, vc0, hu, hv)
        domain[e] = domain_fn(uc0 + hu / 2.0, vc0 + hv / 2.0)
    mesh.quads_q2 = quads_q2
    mesh.quads_q1 = quads_q1
    mesh.elem_param_rect = rects
    mesh.elem_domain = domain

    _volume_quadrature(mesh)
    _boundary_quadrature(mesh, ncu, ncv, cell_active, tag_fn, point_id,
                         u0, v0, hu, hv)
    _collect_segments(mesh)
    return mesh


def _geometry_at(chart, uq, vq, check=True):
    """Tangential shape-gradient factors at parametric points.

    Returns (area_element, inv_metric, au, av, n, shape_op)."""
    au, av = chart.tangents(uq, vq)
    g11 = np.einsum("...i,...i", au, au)
    g12 = np.einsum("...i,...i", au, av)
    g22 = np.einsum("...i,...i", av, av)
    detg = g11 * g22 - g12 * g12
    if check and not np.all(detg > 0):
        raise MeshError("degenerate chart metric")
    area = np.sqrt(detg)
    inv = np.empty(detg.shape + (2, 2))
    inv[..., 0, 0] = g22 / detg
    inv[..., 0, 1] = -g12 / detg
    inv[..., 1, 0] = -g12 / detg
    inv[..., 1, 1] = g11 / detg
    n = chart.normal(uq, vq)
    sop = chart.shape_operator(uq, vq)
    return area, inv, au, av, n, sop


def _volume_quadrature(mesh):
    ne = mesh.n_elems
    pts, wts = fem.VOLUME_PTS, fem.VOLUME_WTS
    nq = len(wts)
    rect = mesh.elem_param_rect
    uq = rect[:, None, 0] + (pts[None, :, 0] + 1.0) * 0.5 * rect[:, None, 2]
    vq = rect[:, None, 1] + (pts[None, :, 1] + 1.0) * 0.5 * rect[:, None, 3]
    area, inv, au, av, nrm, sop = _geometry_at(mesh.chart, uq, vq)
    mesh.qp_uv = np.stack([uq, vq], axis=-1)
    mesh.w = area * wts[None, :] * (rect[:, None, 2] * rect[:, None, 3] / 4.0)
    mesh.normal = nrm
    mesh.shape_op = sop
    d2 = np.broadcast_to(fem.VOLUME_TABLES.d2, (ne, nq, 9, 2))
    d1 = np.broadcast_to(fem.VOLUME_TABLES.d1, (ne, nq, 4, 2))
    du = rect[:, None, None, 2]  # broadcast against (ne, nq, a)
    dv = rect[:, None, None, 3]
    mesh.gradN2 = _grad_from_ref(d2, inv, au, av, du, dv)
    mesh.gradN1 = _grad_from_ref(d1, inv, au, av, du, dv)


def _grad_from_ref(dref, inv, au, av, du, dv):
    """Reference shape gradients (..., a, 2) -> tangential gradients (..., a, 3).

    du, dv are parametric cell extents, broadcastable against dref[..., 0].
    """
    dNu = dref[..., 0] * (2.0 / du)
    dNv = dref[..., 1] * (2.0 / dv)
    asup_u = inv[..., 0, 0, None] * au + inv[..., 0, 1, None] * av
    asup_v = inv[..., 1, 0, None] * au + inv[..., 1, 1, None] * av
    return (dNu[..., :, None] * asup_u[..., None, :]
            + dNv[..., :, None] * asup_v[..., None, :])


def _boundary_quadrature(mesh, ncu, ncv, cell_active, tag_fn, point_id,
                         u0, v0, hu, hv):
    edges = []  # (elem, side, cx, cy)
    active = np.argwhere(cell_active)
    for e, (cy, cx) in enumerate(active):
        for side, (dx, dy) in _SIDE_OUTWARD.items():
            nx, ny = cx + dx, cy + dy
            inside = 0 <= nx < ncu and 0 <= ny < ncv
            if inside and cell_active[ny, nx]:
                continue
            edges.append((e, side, cx, cy))
    nE = len(edges)
    xg, wg = fem.EDGE_PTS_1D, fem.EDGE_WTS_1D

    be_elem = np.empty(nE, dtype=np.int64)
    be_kind = np.empty(nE, dtype=np.int64)
    be_w = np.empty((nE, 3))
    be_tau = np.empty((nE, 3, 3))
    be_ntau = np.empty((nE, 3, 3))
    be_normal = np.empty((nE, 3, 3))
    be_sop = np.empty((nE, 3, 3, 3))
    be_N2 = np.empty((nE, 3, 9))
    be_gN2 = np.empty((nE, 3, 9, 3))
    be_N1 = np.empty((nE, 3, 4))
    be_nodes = np.empty((nE, 3), dtype=np.int64)
    be_len = np.empty(nE)

    for k, (e, side, cx, cy) in enumerate(edges):
        rect = mesh.elem_param_rect[e]
        if side in ("S", "N"):
            eta = -1.0 if side == "S" else 1.0
            ref = np.stack([xg, np.full(3, eta)], axis=-1)
            half = rect[2] / 2.0
            run_param = "u"
        else:
            xi = 1.0 if side == "E" else -1.0
            ref = np.stack([np.full(3, xi), xg], axis=-1)
            half = rect[3] / 2.0
            run_param = "v"
        uq = rect[0] + (ref[:, 0] + 1.0) * 0.5 * rect[2]
        vq = rect[1] + (ref[:, 1] + 1.0) * 0.5 * rect[3]
        # closed-family rims collapse to a point: tolerate a degenerate
        # chart there and zero out the (measure-zero) boundary data below
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            area, inv, au, av, nrm, sop = _geometry_at(
                mesh.chart, uq, vq, check=False)
            run = au if run_param == "u" else av
            speed = np.linalg.norm(run, axis=-1)
            tau = run / np.maximum(speed, 1e-300)[:, None]
            be_w[k] = speed * wg * half
            out_uv = _SIDE_OUTWARD[side]
            out_vec = out_uv[0] * au + out_uv[1] * av
            out_vec = out_vec - np.einsum("qi,qi->q", out_vec, tau)[:, None] * tau
            nn = np.linalg.norm(out_vec, axis=-1)
            be_ntau[k] = out_vec / np.maximum(nn, 1e-300)[:, None]
            be_tau[k] = tau
            be_normal[k] = nrm
            be_sop[k] = sop
            n2, d2 = fem.q2_shape(ref[:, 0], ref[:, 1])
            n1, _ = fem.q1_shape(ref[:, 0], ref[:, 1])
            be_N2[k] = n2
            be_N1[k] = n1
            be_gN2[k] = _grad_from_ref(d2, inv, au, av, rect[2], rect[3])
        be_elem[k] = e
        pos = mesh.chart.position(uq, vq)
        extent = np.linalg.norm(pos - pos[0], axis=-1).max()
        cell_scale = np.sqrt(mesh.w[e].sum())
        if extent < 1e-6 * cell_scale or not np.isfinite(be_w[k]).all():
            be_w[k] = 0.0
            be_tau[k] = (1.0, 0.0, 0.0)
            be_ntau[k] = (0.0, 1.0, 0.0)
            be_gN2[k] = 0.0
        be_len[k] = be_w[k].sum()
        # lattice nodes along the edge
        lx, ly = 2 * cx, 2 * cy
        if side == "S":
            trip = [(lx, ly), (lx + 1, ly), (lx + 2, ly)]
        elif side == "N":
            trip = [(lx, ly + 2), (lx + 1, ly + 2), (lx + 2, ly + 2)]
        elif side == "W":
            trip = [(lx, ly), (lx, ly + 1), (lx, ly + 2)]
        else:
            trip = [(lx + 2, ly), (lx + 2, ly + 1), (lx + 2, ly + 2)]
        be_nodes[k] = [point_id[b, a] for a, b in trip]
        mid_u = u0 + (trip[1][0]) * hu / 2.0
        mid_v = v0 + (trip[1][1]) * hv / 2.0
        be_kind[k] = tag_fn(mid_u, mid_v, out_uv)

    mesh.be_elem = be_elem
    mesh.be_kind = be_kind
    mesh.be_w = be_w
    mesh.be_tau = be_tau
    mesh.be_ntau = be_ntau
    mesh.be_normal = be_normal
    mesh.be_shape_op = be_sop
    mesh.be_N2 = be_N2
    mesh.be_gradN2 = be_gN2
    mesh.be_N1 = be_N1
    mesh.be_nodes = be_nodes
    mesh.be_length = be_len
    mesh.be_segment = np.full(nE, -1, dtype=np.int64)


def _collect_segments(mesh):
    """Group tagged edges into connected chains; compute node arclengths."""
    segments = []
    for kind in (KIND_INLET, KIND_OPEN, KIND_WALL):
        edge_ids = np.flatnonzero(mesh.be_kind == kind)
        if len(edge_ids) == 0:
            continue
        # adjacency via endpoint nodes
        end_nodes = mesh.be_nodes[edge_ids][:, [0, 2]]
        node_edges = {}
        for i, eid in enumerate(edge_ids):
            for nd in end_nodes[i]:
                node_edges.setdefault(nd, []).append(i)
        unvisited = set(range(len(edge_ids)))
        comp_id = 0
        while unvisited:
            seed = min(unvisited)
            comp = {seed}
            stack = [seed]
            while stack:
                cur = stack.pop()
                for nd in end_nodes[cur]:
                    for other in node_edges[nd]:
                        if other in unvisited and other not in comp:
                            comp.add(other)
                            stack.append(other)
            unvisited -= comp
            chain = _order_chain(sorted(comp), end_nodes, node_edges)
            seg_edges = edge_ids[chain]
            name = f"{KIND_NAMES[kind]}{comp_id}"
            seg = _segment_with_arclength(mesh, name, kind, seg_edges)
            mesh.be_segment[seg_edges] = len(segments)
            segments.append(seg)
            comp_id += 1
    mesh.segments = segments
    _collect_boundary_nodes(mesh)


def _order_chain(comp, end_nodes, node_edges):
    """Order component edges into a path (or loop) by endpoint walking."""
    comp_set = set(comp)
    degree = {}
    for i in comp:
        for nd in end_nodes[i]:
            degree[nd] = degree.get(nd, 0) + 1
    start_nodes = [nd for nd, d in degree.items() if d == 1]
    if start_nodes:
        node = min(start_nodes)
    else:  # closed loop
        node = min(end_nodes[comp[0]])
    chain = []
    used = set()
    while True:
        nxt = None
        for cand in node_edges.get(node, []):
            if cand in comp_set and cand not in used:
                nxt = cand
                break
        if nxt is None:
            break
        used.add(nxt)
        chain.append(nxt)
        a, b = end_nodes[nxt]
        node = b if a == node else a
        if len(used) == len(comp):
            break
    # disjoint leftovers (shouldn't happen for manifold boundaries)
    chain.extend(i for i in comp if i not in used)
    return chain


def _segment_with_arclength(mesh, name, kind, seg_edges):
    node_ids = []
    node_s = []
    s = 0.0
    prev_end = None
    for eid in seg_edges:
        trip = list(mesh.be_nodes[eid])
        length = mesh.be_length[eid]
        if prev_end is not None and trip[0] != prev_end and trip[2] == prev_end:
            trip = trip[::-1]
        if prev_end is None:
            # orient first edge toward the second, if any
            if len(seg_edges) > 1:
                nxt = set(mesh.be_nodes[seg_edges[1]][[0, 2]])
                if trip[0] in nxt and trip[2] not in nxt:
                    trip = trip[::-1]
            node_ids.append(trip[0])
            node_s.append(0.0)
        node_ids.append(trip[1])
        node_s.append(s + 0.5 * length)
        node_ids.append(trip[2])
        node_s.append(s + length)
        s += length
        prev_end = trip[2]
    return BoundarySegment(
        name=name,
        kind=kind,
        edges=np.asarray(seg_edges),
        length=s,
        node_ids=np.asarray(node_ids, dtype=np.int64),
        node_arclength=np.asarray(node_s),
    )


def _collect_boundary_nodes(mesh):
    inlet_nodes, inlet_zeta, inlet_dir = [], [], []
    seen = {}
    taken = set()
    for seg in mesh.segments:
        if seg.kind != KIND_INLET:
            continue
        L = seg.length
        for eid in seg.edges:
            # inward conormal per edge quadrature trio; use edge-mean per node
            inward = -mesh.be_ntau[eid].mean(axis=0)
            inward = inward / np.linalg.norm(inward)
            for nd in mesh.be_nodes[eid]:
                seen.setdefault(nd, inward)
        for nd, s in zip(seg.node_ids, seg.node_arclength):
            if int(nd) in taken:
                continue
            taken.add(int(nd))
            inlet_nodes.append(int(nd))
            inlet_zeta.append(s / L if L > 0 else 0.0)
    for nd in inlet_nodes:
        inlet_dir.append(seen[nd])
    mesh.inlet_nodes = np.asarray(inlet_nodes, dtype=np.int64)
    mesh.inlet_zeta = np.asarray(inlet_zeta)
    mesh.inlet_dir = (np.asarray(inlet_dir).reshape(-1, 3)
                      if inlet_dir else np.zeros((0, 3)))
    wall_mask = mesh.be_kind == KIND_WALL
    mesh.wall_nodes = (np.unique(mesh.be_nodes[wall_mask])
                       if wall_mask.any() else np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# case builders
# ---------------------------------------------------------------------------

def build_case(spec: CaseSpec) -> BaseManifoldMesh:
    """Build the tagged base-manifold mesh for a benchmark case."""
    spec.validate()
    builder = {
        "straight_channel": _build_straight_channel,
        "bending_channel": _build_bending_channel,
        "four_terminal": _build_four_terminal,
        "square_sphere": _build_square_sphere,
        "cylinder_strip": _build_cylinder_strip,
    }[spec.case_id]
    mesh = builder(spec)
    mesh.case = spec
    return mesh


def _build_straight_channel(spec):
    p = spec.params
    length = float(p.get("length", 4.0))
    height = float(p.get("height", 1.0))
    band = p.get("solid_band", None)  # (v_lo, v_hi) design band or None
    res = spec.resolution
    ncu = max(1, round(length * res))
    ncv = max(1, round(height * res))
    mask = np.ones((ncv, ncu), dtype=bool)

    if band is None:
        def domain_fn(u, v):
            return DOMAIN_FLUID

        def tag_fn(u, v, out):
            if out == (-1, 0):
                return KIND_INLET
            if out == (1, 0):
                return KIND_OPEN
            return KIND_WALL
    else:
        lo, hi = float(band[0]), float(band[1])

        def domain_fn(u, v):
            return DOMAIN_DESIGN if lo < v < hi else DOMAIN_FLUID

        def tag_fn(u, v, out):
            if out == (-1, 0) and not (lo < v < hi):
                return KIND_INLET
            if out == (1, 0) and not (lo < v < hi):
                return KIND_OPEN
            return KIND_WALL

    return _build_structured(PlaneChart(), (0.0, length), (0.0, height),
                             ncu, ncv, mask, tag_fn, domain_fn)


def _stub_cells(res_h, lo, hi):
    """Lattice index interval [i0, i1) covering (lo, hi) snapped to cells."""
    i0 = int(round(lo / res_h))
    i1 = int(round(hi / res_h))
    return max(i0, 0), i1


def _build_bending_channel(spec):
    p = spec.params
    width = float(p.get("channel_width", 0.2))
    stub = float(p.get("stub_length", 0.2))
    ic = float(p.get("inlet_center", 0.8))   # along west edge (v)
    oc = float(p.get("outlet_center", 0.8))  # along south edge (u)
    res = spec.resolution
    h = 1.0 / res
    ns = max(1, round(stub * res))
    u0, v0 = -ns * h, -ns * h
    ncu = ncv = res + ns

    mask = np.zeros((ncv, ncu), dtype=bool)
    cu = u0 + (np.arange(ncu) + 0.5) * h
    cv = v0 + (np.arange(ncv) + 0.5) * h
    in_sq = (cu[None, :] > 0) & (cv[:, None] > 0)
    j0, j1 = _stub_cells(h, ic - width / 2.0 - v0, ic + width / 2.0 - v0)
    in_inlet = (cu[None, :] < 0) & (np.arange(ncv)[:, None] >= j0) \
        & (np.arange(ncv)[:, None] < j1)
    i0, i1 = _stub_cells(h, oc - width / 2.0 - u0, oc + width / 2.0 - u0)
    in_outlet = (cv[:, None] < 0) & (np.arange(ncu)[None, :] >= i0) \
        & (np.arange(ncu)[None, :] < i1)
    mask |= in_sq | in_inlet | in_outlet

    def domain_fn(u, v):
        return DOMAIN_DESIGN if (u > 0 and v > 0) else DOMAIN_FLUID

    tol = h * 1e-6

    def tag_fn(u, v, out):
        if out == (-1, 0) and u < u0 + tol:
            return KIND_INLET
        if out == (0, -1) and v < v0 + tol:
            return KIND_OPEN
        return KIND_WALL

    return _build_structured(PlaneChart(), (u0, 1.0), (v0, 1.0),
                             ncu, ncv, mask, tag_fn, domain_fn)


def _build_four_terminal(spec):
    p = spec.params
    width = float(p.get("channel_width", 0.2))
    stub = float(p.get("stub_length", 0.2))
    centers = p.get("port_centers", (0.25, 0.75))
    res = spec.resolution
    h = 1.0 / res
    ns = max(1, round(stub * res))
    u0 = -ns * h
    u1 = 1.0 + ns * h
    ncu = res + 2 * ns
    ncv = res

    mask = np.zeros((ncv, ncu), dtype=bool)
    cu = u0 + (np.arange(ncu) + 0.5) * h
    in_sq = (cu[None, :] > 0) & (cu[None, :] < 1.0) \
        & np.ones((ncv, 1), dtype=bool)
    mask |= in_sq
    for c in centers:
        j0, j1 = _stub_cells(h, c - width / 2.0, c + width / 2.0)
        rows = (np.arange(ncv)[:, None] >= j0) & (np.arange(ncv)[:, None] < j1)
        mask |= rows & (cu[None, :] < 0)
        mask |= rows & (cu[None, :] > 1.0)

    def domain_fn(u, v):
        return DOMAIN_DESIGN if 0 < u < 1 else DOMAIN_FLUID

    tol = h * 1e-6

    def tag_fn(u, v, out):
        if out == (-1, 0) and u < u0 + tol:
            return KIND_INLET
        if out == (1, 0) and u > u1 - tol:
            return KIND_OPEN
        return KIND_WALL

    return _build_structured(PlaneChart(), (u0, u1), (0.0, 1.0),
                             ncu, ncv, mask, tag_fn, domain_fn)


def _build_square_sphere(spec):
    res = spec.resolution
    mask = np.ones((res, res), dtype=bool)
    closed = spec.t >= 1.0 - 1e-12
    chart = PlaneChart() if spec.t == 0.0 else SphereCapChart(spec.t)

    def domain_fn(u, v):
        return DOMAIN_DESIGN

    def tag_fn(u, v, out):
        if closed:
            return KIND_WALL
        if out == (-1, 0):
            return KIND_INLET
        if out == (1, 0):
            return KIND_OPEN
        return KIND_WALL

    mesh = _build_structured(chart, (0.0, 1.0), (0.0, 1.0),
                             res, res, mask, tag_fn, domain_fn)
    if closed:
        mesh.pin_points = [(0, 0.0)]
    return mesh


def _build_cylinder_strip(spec):
    p = spec.params
    width = float(p.get("width", 1.0))
    height = float(p.get("height", 1.0))
    res = spec.resolution
    ncu = max(1, round(width * res))
    ncv = max(1, round(height * res))
    mask = np.ones((ncv, ncu), dtype=bool)
    chart = BentStripChart(spec.t, width=width, height=height)

    def domain_fn(u, v):
        return DOMAIN_DESIGN

    def tag_fn(u, v, out):
        if out == (0, -1):
            return KIND_INLET
        if out == (0, 1):
            return KIND_OPEN
        return KIND_WALL  # the cut seam

    return _build_structured(chart, (0.0, 1.0), (0.0, 1.0),
                             ncu, ncv, mask, tag_fn, domain_fn)


# ---------------------------------------------------------------------------
# inlet data
# ---------------------------------------------------------------------------

def inlet_profile(mesh: BaseManifoldMesh, U0: float):
    """Parabolic inlet velocity at inlet Q2 nodes.

    Magnitude 4*U0*zeta*(1-zeta) of the normalized arclength zeta along each
    inlet segment (peak U0 at the midpoint, zero at the endpoints), directed
    along the inward conormal.
    """
    if mesh.inlet_nodes is None or len(mesh.inlet_nodes) == 0:
        raise MeshError("mesh has no inlet segment")
    for seg in mesh.segments:
        if seg.kind == KIND_INLET and seg.length <= 0.0:
            raise MeshError(f"inlet segment {seg.name} has zero length")
    mag = 4.0 * U0 * mesh.inlet_zeta * (1.0 - mesh.inlet_zeta)
    return mesh.inlet_nodes, mag[:, None] * mesh.inlet_dir
