"""Extruded hexahedral meshes of planar cross-sections.

A cross-section is meshed with quadrilaterals in the xy-plane and extruded
along z.  Node numbering is layer-major: the node of 2D vertex ``i`` in node
layer ``k`` has index ``k * n2d + i``, so every xy-column is addressable
without search.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

REGION_TAGS = ("spring", "anchor", "electrode", "mass")

# reference hexahedron corners, counter-clockwise bottom face then top face
HEX_CORNERS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=float,
)


class MeshError(ValueError):
    """Invalid geometry: degenerate polygons, inverted elements, asymmetry."""


class ElementInversionError(MeshError):
    def __init__(self, elements, message=None):
        self.elements = np.asarray(elements, dtype=int)
        shown = ", ".join(str(e) for e in self.elements[:20])
        super().__init__(message or f"inverted elements: {shown}")


# ----------------------------------------------------------------------------
# cross-sections


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def _loop_is_simple(pts: np.ndarray) -> bool:
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a, b, pts[j], pts[(j + 1) % n]):
                return False
    return True


def points_in_loop(points: np.ndarray, loop: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over ``points``."""
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    xa, ya = loop[:, 0][None, :], loop[:, 1][None, :]
    xb, yb = np.roll(loop[:, 0], -1)[None, :], np.roll(loop[:, 1], -1)[None, :]
    straddle = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xa + (y - ya) * (xb - xa) / (yb - ya)
    hits = straddle & (x < xint)
    return (np.count_nonzero(hits, axis=1) % 2) == 1


@dataclass(frozen=True)
class CrossSection2D:
    """Planar cross-section made of tagged polygons.

    ``polygons[k]`` is a list of loops (vertex index tuples); the first loop
    is the outer boundary (counter-clockwise), the rest are holes (clockwise).
    """

    vertices: np.ndarray
    polygons: list
    tags: list
    area_tol: float = 1e-18

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        if len(self.tags) != len(self.polygons):
            raise MeshError("every polygon needs a region tag")
        for k, (loops, tag) in enumerate(zip(self.polygons, self.tags)):
            if tag not in REGION_TAGS:
                raise MeshError(f"polygon {k}: unknown region tag {tag!r}")
            for li, loop in enumerate(loops):
                pts = self.vertices[list(loop)]
                area = _signed_area(pts)
                if abs(area) < self.area_tol:
                    raise MeshError(f"polygon {k}: degenerate loop {li} (area {area:g})")
                if li == 0 and area < 0:
                    raise MeshError(f"polygon {k}: outer loop must be counter-clockwise")
                if li > 0 and area > 0:
                    raise MeshError(f"polygon {k}: hole {li} must be clockwise")
                if not _loop_is_simple(pts):
                    raise MeshError(f"polygon {k}: loop {li} self-intersects")

    def loop_points(self, k: int, li: int = 0) -> np.ndarray:
        return self.vertices[list(self.polygons[k][li])]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Index of the first polygon containing each point, -1 if none."""
        owner = np.full(len(points), -1, dtype=int)
        for k, loops in enumerate(self.polygons):
            inside = points_in_loop(points, self.loop_points(k, 0))
            for li in range(1, len(loops)):
                inside &= ~points_in_loop(points, self.loop_points(k, li))
            owner[(owner < 0) & inside] = k
        return owner

    def is_rectilinear(self) -> bool:
        for k, loops in enumerate(self.polygons):
            for li in range(len(loops)):
                pts = self.loop_points(k, li)
                d = np.roll(pts, -1, axis=0) - pts
                if np.any((np.abs(d[:, 0]) > 0) & (np.abs(d[:, 1]) > 0)):
                    return False
        return True

    @classmethod
    def from_rectangles(cls, rects, tags) -> "CrossSection2D":
        """Section built from axis-aligned rectangles ``(x0, y0, x1, y1)``."""
        verts, polys = [], []
        for x0, y0, x1, y1 in rects:
            base = len(verts)
            verts += [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            polys.append([tuple(range(base, base + 4))])
        return cls(np.array(verts), polys, list(tags))


@dataclass(frozen=True)
class QuadMesh2D:
    """Planar quadrilateral mesh; quads are counter-clockwise."""

    points: np.ndarray
    quads: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "quads", np.asarray(self.quads, dtype=int))
        object.__setattr__(self, "tags", np.asarray(self.tags, dtype=object))


def _graded(coords, h):
    lines = [coords[0]]
    for a, b in zip(coords[:-1], coords[1:]):
        n = max(1, int(math.ceil((b - a) / h - 1e-9)))
        lines.extend(a + (b - a) * np.arange(1, n + 1) / n)
    return np.array(lines)


def _unique_sorted(values, tol):
    values = np.sort(values)
    keep = [values[0]]
    for v in values[1:]:
        if v - keep[-1] > tol:
            keep.append(v)
    return np.array(keep)


def mesh_rectilinear(section: CrossSection2D, h: float) -> QuadMesh2D:
    """Structured tensor-grid quad mesh of a rectilinear section."""
    v = section.vertices
    span = float(np.ptp(v, axis=0).max())
    tol = 1e-9 * span
    xs = _graded(_unique_sorted(v[:, 0], tol), h)
    ys = _graded(_unique_sorted(v[:, 1], tol), h)
    nx, ny = len(xs), len(ys)
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    CX, CY = np.meshgrid(cx, cy, indexing="ij")
    owner = section.contains(np.column_stack([CX.ravel(), CY.ravel()]))
    ii, jj = np.unravel_index(np.nonzero(owner >= 0)[0], (nx - 1, ny - 1))
    cell_owner = owner[owner >= 0]
    grid_id = lambda i, j: i * ny + j  # noqa: E731
    quads = np.column_stack(
        [grid_id(ii, jj), grid_id(ii + 1, jj), grid_id(ii + 1, jj + 1), grid_id(ii, jj + 1)]
    )
    used, inverse = np.unique(quads, return_inverse=True)
    gi, gj = np.unravel_index(used, (nx, ny))
    points = np.column_stack([xs[gi], ys[gj]])
    tags = np.array([section.tags[k] for k in cell_owner], dtype=object)
    return QuadMesh2D(points, inverse.reshape(quads.shape), tags)


def mesh_ogrid(loop: np.ndarray, h: float, tag: str) -> QuadMesh2D:
    """O-grid quad mesh of a star-shaped loop (fallback for curved sections).

    Loop vertices are used directly as boundary nodes when their count is a
    multiple of four; otherwise the perimeter is resampled.
    """
    loop = np.asarray(loop, dtype=float)
    centroid = loop.mean(axis=0)
    if len(loop) % 4:
        perim = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(np.vstack([loop, loop[:1]]), axis=0), axis=1))]
        n_b = 4 * max(2, int(math.ceil(perim[-1] / (4 * h))))
        s = np.linspace(0.0, perim[-1], n_b, endpoint=False)
        closed = np.vstack([loop, loop[:1]])
        loop = np.column_stack([np.interp(s, perim, closed[:, 0]), np.interp(s, perim, closed[:, 1])])
    n_side = len(loop) // 4
    rel = loop - centroid
    r_min = float(np.min(np.linalg.norm(rel, axis=1)))
    half = 0.45 * r_min
    # square boundary, counter-clockwise starting at the bottom-left corner
    t = np.arange(n_side) / n_side
    sq = np.vstack(
        [
            np.column_stack([-1 + 2 * t, -np.ones(n_side)]),
            np.column_stack([np.ones(n_side), -1 + 2 * t]),
            np.column_stack([1 - 2 * t, np.ones(n_side)]),
            np.column_stack([-np.ones(n_side), 1 - 2 * t]),
        ]
    )
    angles = np.arctan2(rel[:, 1], rel[:, 0])
    start = int(np.argmin(np.abs(np.angle(np.exp(1j * (angles + 0.75 * np.pi))))))
    rel = np.roll(rel, -start, axis=0)
    n_ring = max(1, int(math.ceil((r_min - half) / h)))
    # core grid
    g = np.linspace(-1, 1, n_side + 1)
    GX, GY = np.meshgrid(g, g, indexing="ij")
    core = half * np.column_stack([GX.ravel(), GY.ravel()])
    core_id = lambda i, j: i * (n_side + 1) + j  # noqa: E731
    quads = []
    for i in range(n_side):
        for j in range(n_side):
            quads.append([core_id(i, j), core_id(i + 1, j), core_id(i + 1, j + 1), core_id(i, j + 1)])
    # map square boundary index -> core node id
    sq_ids = []
    for k in range(4 * n_side):
        i = int(round((sq[k, 0] + 1) / 2 * n_side))
        j = int(round((sq[k, 1] + 1) / 2 * n_side))
        sq_ids.append(core_id(i, j))
    points = [core]
    ring_ids = [np.array(sq_ids)]
    nb = 4 * n_side
    offset = len(core)
    for r in range(1, n_ring + 1):
        t_r = r / n_ring
        layer = (1 - t_r) * half * sq + t_r * rel
        points.append(layer)
        ring_ids.append(offset + np.arange(nb))
        offset += nb
    for r in range(n_ring):
        a, b = ring_ids[r], ring_ids[r + 1]
        for k in range(nb):
            k1 = (k + 1) % nb
            quads.append([a[k], b[k], b[k1], a[k1]])
    pts = np.vstack(points) + centroid
    return QuadMesh2D(pts, np.array(quads), np.array([tag] * len(quads), dtype=object))


def mesh_ruled(side_a: np.ndarray, side_b: np.ndarray, n_across: int, tag: str) -> QuadMesh2D:
    """Ruled quad mesh between two matching polylines (e.g. a curved strip).

    ``side_a`` must run so that ``side_b`` lies on its left.
    """
    side_a, side_b = np.asarray(side_a, float), np.asarray(side_b, float)
    n_along = len(side_a)
    t = np.arange(n_across + 1) / n_across
    pts = (1 - t)[:, None, None] * side_a[None] + t[:, None, None] * side_b[None]
    pts = pts.reshape(-1, 2)
    idx = lambda r, i: r * n_along + i  # noqa: E731
    quads = [
        [idx(r, i), idx(r, i + 1), idx(r + 1, i + 1), idx(r + 1, i)]
        for r in range(n_across)
        for i in range(n_along - 1)
    ]
    return QuadMesh2D(pts, np.array(quads), np.array([tag] * len(quads), dtype=object))


def merge_quad_meshes(meshes, tol: float) -> QuadMesh2D:
    """Concatenate quad meshes, fusing coincident nodes."""
    pts = np.vstack([m.points for m in meshes])
    quads, tags, base = [], [], 0
    for m in meshes:
        quads.append(m.quads + base)
        tags.append(m.tags)
        base += len(m.points)
    tree = cKDTree(pts)
    rep = np.arange(len(pts))
    for i, j in sorted(tree.query_pairs(tol)):
        ri, rj = rep[i], rep[j]
        while rep[ri] != ri:
            ri = rep[ri]
        while rep[rj] != rj:
            rj = rep[rj]
        if ri != rj:
            rep[max(ri, rj)] = min(ri, rj)
    for i in range(len(rep)):
        r = rep[i]
        while rep[r] != r:
            r = rep[r]
        rep[i] = r
    used, inverse = np.unique(rep, return_inverse=True)
    q = inverse[np.vstack(quads)]
    return QuadMesh2D(pts[used], q, np.concatenate(tags))


def mesh_section(section: CrossSection2D, h: float) -> QuadMesh2D:
    if section.is_rectilinear():
        return mesh_rectilinear(section, h)
    if len(section.polygons) == 1 and len(section.polygons[0]) == 1:
        return mesh_ogrid(section.loop_points(0, 0), h, section.tags[0])
    raise MeshError("only rectilinear sections or single star-shaped loops can be meshed")


# ----------------------------------------------------------------------------
# boundary topology


def boundary_loops(quads: np.ndarray) -> list:
    """Closed boundary loops of a quad mesh, interior on the left of each."""
    edges = np.stack([quads, np.roll(quads, -1, axis=1)], axis=-1).reshape(-1, 2)
    key = np.sort(edges, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bnd = edges[counts[inv.ravel()] == 1]
    nxt = {}
    for a, b in bnd:
        if a in nxt:
            raise MeshError(f"non-manifold boundary at node {a}")
        nxt[int(a)] = int(b)
    loops, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop, node = [], start
        while node not in seen:
            seen.add(node)
            loop.append(node)
            node = nxt[node]
        loops.append(np.array(loop, dtype=int))
    return loops


@dataclass
class BoundaryNormals:
    nodes: np.ndarray  # 2D node indices
    normals: np.ndarray  # (n, 2) unit outward normals
    flagged: np.ndarray  # nodes whose bisector degenerated


def compute_boundary_normals(points: np.ndarray, loops) -> BoundaryNormals:
    """Angle-bisector outward normals at every boundary node."""
    nodes, normals, flagged = [], [], []
    for loop in loops:
        p = points[loop]
        e = np.roll(p, -1, axis=0) - p  # edge i: node i -> node i+1
        length = np.linalg.norm(e, axis=1)
        en = np.column_stack([e[:, 1], -e[:, 0]]) / length[:, None]
        prev_n, next_n = np.roll(en, 1, axis=0), en
        prev_l, next_l = np.roll(length, 1), length
        avg = prev_n + next_n
        norm = np.linalg.norm(avg, axis=1)
        bad = norm < 1e-12
        out = np.empty_like(avg)
        out[~bad] = avg[~bad] / norm[~bad, None]
        longer = np.where((prev_l >= next_l)[:, None], prev_n, next_n)
        out[bad] = longer[bad]
        nodes.append(loop)
        normals.append(out)
        flagged.extend(loop[bad].tolist())
    if flagged:
        log.warning("reflex spike at boundary nodes %s; using longer-edge normal", flagged)
    return BoundaryNormals(np.concatenate(nodes), np.vstack(normals), np.array(flagged, dtype=int))


# ----------------------------------------------------------------------------
# extruded mesh


def _hex_jacobian_dets(nodes: np.ndarray, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
    """det J at reference points ``points`` (P, 3) for every element -> (E, P)."""
    xi, eta, zeta = points[:, 0:1], points[:, 1:2], points[:, 2:3]
    c = HEX_CORNERS
    dN = np.stack(
        [
            c[:, 0] * (1 + eta * c[:, 1]) * (1 + zeta * c[:, 2]) / 8,
            c[:, 1] * (1 + xi * c[:, 0]) * (1 + zeta * c[:, 2]) / 8,
            c[:, 2] * (1 + xi * c[:, 0]) * (1 + eta * c[:, 1]) / 8,
        ],
        axis=-1,
    )  # (P, 8, 3)
    X = nodes[elements]  # (E, 8, 3)
    J = np.einsum("eak,pal->epkl", X, dN)
    return np.linalg.det(J)


@dataclass(frozen=True)
class ExtrudedMesh:
    """Hex8 mesh of a cross-section extruded along z.

    Attributes
    ----------
    nodes : (N, 3) coordinates in meters, layer-major.
    elements : (E, 8) node indices; element ``k * nq + q`` is quad ``q`` in layer ``k``.
    layers : number of element layers.
    quads : (nq, 4) 2D connectivity (indices into the first node layer).
    quad_tags : region tag per quad.
    fixed_nodes : indices of nodes with zero displacement.
    """

    nodes: np.ndarray
    elements: np.ndarray
    layers: int
    quads: np.ndarray
    quad_tags: np.ndarray
    fixed_nodes: np.ndarray
    loops: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.loops is None:
            object.__setattr__(self, "loops", boundary_loops(self.quads))

    @property
    def n2d(self) -> int:
        return len(self.nodes) // (self.layers + 1)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def points2d(self) -> np.ndarray:
        return self.nodes[: self.n2d, :2]

    @property
    def thickness(self) -> float:
        return float(self.nodes[-1, 2] - self.nodes[0, 2])

    @property
    def boundary_nodes2d(self) -> np.ndarray:
        return np.concatenate(self.loops)

    @property
    def exterior_nodes(self) -> np.ndarray:
        """3D indices of every node on the lateral boundary."""
        b = self.boundary_nodes2d
        return (np.arange(self.layers + 1)[:, None] * self.n2d + b[None, :]).ravel()

    def column(self, i2d) -> np.ndarray:
        return np.asarray(i2d)[..., None] + self.n2d * np.arange(self.layers + 1)

    def boundary_normals(self) -> BoundaryNormals:
        return compute_boundary_normals(self.points2d, self.loops)

    @property
    def element_tags(self) -> np.ndarray:
        return np.tile(self.quad_tags, self.layers)

    def region_elements(self, tags) -> np.ndarray:
        if isinstance(tags, str):
            tags = (tags,)
        return np.nonzero(np.isin(self.element_tags, list(tags)))[0]

    def region_nodes2d(self, tags) -> np.ndarray:
        """2D nodes touched by any quad of the given regions."""
        if isinstance(tags, str):
            tags = (tags,)
        q = self.quads[np.isin(self.quad_tags, list(tags))]
        return np.unique(q)

    def jacobian_dets(self, points=None) -> np.ndarray:
        if points is None:
            from .fem import GAUSS_POINTS

            points = GAUSS_POINTS
        return _hex_jacobian_dets(self.nodes, self.elements, points)

    def check_jacobians(self) -> None:
        dets = self.jacobian_dets()
        bad = np.nonzero(np.any(dets <= 0, axis=1))[0]
        if len(bad):
            raise ElementInversionError(bad)

    def with_nodes(self, nodes: np.ndarray, check: bool = True) -> "ExtrudedMesh":
        new = dataclasses.replace(self, nodes=np.asarray(nodes, dtype=float))
        if check:
            new.check_jacobians()
        return new


def extrude_quads(
    qmesh: QuadMesh2D, thickness: float, layers: int, fix: str = "bottom", check: bool = True
) -> ExtrudedMesh:
    """Extrude a quad mesh into ``layers`` hex layers of total ``thickness``.

    ``fix`` selects the anchor constraint: ``"bottom"`` clamps the bottom face
    of anchor regions, ``"all"`` clamps every anchor node.
    """
    if layers < 1:
        raise MeshError("layers must be >= 1")
    if thickness <= 0:
        raise MeshError("thickness must be positive")
    pts, quads = qmesh.points, qmesh.quads
    areas = np.array([_signed_area(pts[q]) for q in quads])
    if np.any(areas <= 0):
        raise ElementInversionError(np.nonzero(areas <= 0)[0], "clockwise or degenerate quads")
    n2d, nq = len(pts), len(quads)
    z = np.linspace(0.0, thickness, layers + 1)
    nodes = np.column_stack(
        [np.tile(pts, (layers + 1, 1)), np.repeat(z, n2d)]
    )
    elements = np.vstack(
        [np.hstack([quads + k * n2d, quads + (k + 1) * n2d]) for k in range(layers)]
    )
    anchor2d = np.unique(quads[qmesh.tags == "anchor"])
    if fix == "bottom":
        fixed = anchor2d
    elif fix == "all":
        fixed = (anchor2d[:, None] + n2d * np.arange(layers + 1)).ravel()
    else:
        raise MeshError(f"unknown fix mode {fix!r}")
    mesh = ExtrudedMesh(nodes, elements, layers, quads, qmesh.tags, np.sort(fixed))
    if check:
        mesh.check_jacobians()
    return mesh


def extrude(
    section: CrossSection2D,
    thickness: float,
    layers: int,
    target_edge_length: float,
    fix: str = "bottom",
) -> ExtrudedMesh:
    """Mesh a cross-section and extrude it into a hex8 mesh."""
    return extrude_quads(mesh_section(section, target_edge_length), thickness, layers, fix=fix)


# ----------------------------------------------------------------------------
# geometry changes


def offset_boundary(mesh: ExtrudedMesh, delta: float) -> ExtrudedMesh:
    """Move every exterior node by ``delta`` along its outward xy-normal.

    Positive ``delta`` dilates the structure, negative erodes it.
    """
    bn = mesh.boundary_normals()
    disp = np.zeros((mesh.n2d, 2))
    disp[bn.nodes] = delta * bn.normals
    nodes = mesh.nodes.copy()
    nodes[:, :2] += np.tile(disp, (mesh.layers + 1, 1))
    return mesh.with_nodes(nodes)


@dataclass
class SymmetryMap:
    """Mirror images of 2D nodes under reflections through the centroid.

    ``images[name]`` maps every 2D node to its image under the reflection
    ``name`` (``"x"`` negates x, ``"y"`` negates y, ``"xy"`` both).
    """

    center: np.ndarray
    axes: tuple
    images: dict
    master: np.ndarray  # exterior 2D nodes in the master quadrant
    tol: float

    def node_pairs(self) -> dict:
        """Master exterior node -> distinct mirror images (excluding itself)."""
        out = {}
        for m in self.master:
            imgs = sorted({int(self.images[r][m]) for r in self.images} - {int(m)})
            out[int(m)] = imgs
        return out

    def sign_rules(self) -> dict:
        return {r: np.array([-1.0 if "x" in r else 1.0, -1.0 if "y" in r else 1.0]) for r in self.images}

    def orbit(self, i: int) -> list:
        return sorted({int(i)} | {int(self.images[r][i]) for r in self.images})


def _area_centroid(points, quads):
    p = points[quads]
    # split each quad into two triangles
    tri = [(0, 1, 2), (0, 2, 3)]
    a_tot, c_tot = 0.0, np.zeros(2)
    for i, j, k in tri:
        a = 0.5 * ((p[:, j, 0] - p[:, i, 0]) * (p[:, k, 1] - p[:, i, 1]) - (p[:, j, 1] - p[:, i, 1]) * (p[:, k, 0] - p[:, i, 0]))
        c = (p[:, i] + p[:, j] + p[:, k]) / 3
        a_tot += a.sum()
        c_tot += (a[:, None] * c).sum(axis=0)
    return c_tot / a_tot


def detect_symmetry(mesh: ExtrudedMesh, axes=("x", "y"), tol: float = 1e-9) -> SymmetryMap:
    """Match every 2D node with its mirror image about the centroid axes."""
    axes = tuple(sorted(set(axes)))
    pts = mesh.points2d
    center = _area_centroid(pts, mesh.quads)
    tree = cKDTree(pts)
    reflections = list(axes) + (["xy"] if len(axes) == 2 else [])
    images = {}
    for r in reflections:
        s = np.array([-1.0 if "x" in r else 1.0, -1.0 if "y" in r else 1.0])
        mirrored = center + (pts - center) * s
        dist, idx = tree.query(mirrored)
        bad = np.nonzero(dist > tol)[0]
        if len(bad):
            raise MeshError(
                f"mesh not symmetric under {r}-reflection: unmatched nodes {bad[:20].tolist()}"
            )
        images[r] = idx
    bnd = mesh.boundary_nodes2d
    rel = pts[bnd] - center
    keep = np.ones(len(bnd), dtype=bool)
    if "x" in axes:
        keep &= rel[:, 0] >= -tol
    if "y" in axes:
        keep &= rel[:, 1] >= -tol
    return SymmetryMap(center, axes, images, np.sort(bnd[keep]), tol)


# ----------------------------------------------------------------------------
# mesh interchange file


def write_mesh(mesh: ExtrudedMesh, path) -> None:
    """Write the line-oriented ``meshformat 1`` text file."""
    bn = mesh.boundary_normals()
    lines = ["meshformat 1"]
    lines += [f"node {i} {x!r} {y!r} {z!r}" for i, (x, y, z) in enumerate(mesh.nodes.tolist())]
    lines += ["hex {} {}".format(e, " ".join(map(str, row))) for e, row in enumerate(mesh.elements.tolist())]
    lines += [f"fixed {i}" for i in mesh.fixed_nodes.tolist()]
    tags = mesh.element_tags
    for t in REGION_TAGS:
        ids = np.nonzero(tags == t)[0]
        if len(ids):
            lines.append("region {} {}".format(t, " ".join(map(str, ids.tolist()))))
    for k in range(mesh.layers + 1):
        for i, (nx, ny) in zip(bn.nodes.tolist(), bn.normals.tolist()):
            lines.append(f"exterior {k * mesh.n2d + i} {nx!r} {ny!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> ExtrudedMesh:
    """Read a ``meshformat 1`` file written with layer-major node ordering."""
    nodes, hexes, fixed, region = {}, {}, [], {}
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if header != ["meshformat", "1"]:
            raise MeshError(f"{path}: missing 'meshformat 1' header")
        for lineno, line in enumerate(fh, start=2):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "node":
                    nodes[int(tok[1])] = [float(t) for t in tok[2:5]]
                elif tok[0] == "hex":
                    hexes[int(tok[1])] = [int(t) for t in tok[2:10]]
                elif tok[0] == "fixed":
                    fixed.append(int(tok[1]))
                elif tok[0] == "region":
                    for e in tok[2:]:
                        region[int(e)] = tok[1]
                elif tok[0] == "exterior":
                    pass  # normals are recomputed from geometry
                else:
                    raise MeshError(f"{path}:{lineno}: unknown record {tok[0]!r}")
            except (IndexError, ValueError) as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
    X = np.array([nodes[i] for i in range(len(nodes))])
    el = np.array([hexes[i] for i in range(len(hexes))])
    zs = _unique_sorted(X[:, 2], 1e-9 * max(np.ptp(X[:, 2]), 1e-30))
    layers = len(zs) - 1
    n2d = len(X) // (layers + 1)
    nq = len(el) // layers
    quads = el[:nq, :4]
    if np.any(quads >= n2d):
        raise MeshError(f"{path}: nodes are not layer-major")
    qtags = np.array([region.get(q, "mass") for q in range(nq)], dtype=object)
    return ExtrudedMesh(X, el, layers, quads, qtags, np.array(sorted(fixed), dtype=int))
