"""Node-based shape parametrization of extruded meshes.

Each design parameter pushes one exterior node of a movable region along its
(frozen) outward normal and drags nearby boundary and interior nodes with
linearly decaying weights.  The map p -> node positions is linear,
X(p) = X0 + G p, with identical xy-displacements in every node layer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import ElementInversionError, ExtrudedMesh, SymmetryMap


class DesignError(ValueError):
    pass


@dataclass
class DesignVector:
    p: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    parameter_nodes: np.ndarray  # parameter j -> master exterior 2D node

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.lower = np.broadcast_to(np.asarray(self.lower, float), self.p.shape).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, float), self.p.shape).copy()

    @property
    def n(self) -> int:
        return len(self.p)

    def within_box(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.p >= self.lower - tol) and np.all(self.p <= self.upper + tol))


def write_design(path, p) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("designvec 1\n")
        for j, v in enumerate(np.asarray(p, float).tolist()):
            fh.write(f"p {j} {v!r}\n")


def read_design(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        if fh.readline().split() != ["designvec", "1"]:
            raise DesignError(f"{path}: missing 'designvec 1' header")
        vals = {}
        for lineno, line in enumerate(fh, start=2):
            tok = line.split()
            if not tok:
                continue
            if tok[0] != "p" or len(tok) != 3:
                raise DesignError(f"{path}:{lineno}: expected 'p <j> <value>'")
            vals[int(tok[1])] = float(tok[2])
    return np.array([vals[j] for j in range(len(vals))])


@dataclass
class MorphOperator:
    """Constant linear morphing map.

    ``G`` has shape (2 * n2d, n_p): rows ``2 i`` and ``2 i + 1`` are the x and
    y displacement of 2D node ``i`` per unit parameter.
    """

    G: sp.csc_matrix
    base_nodes: np.ndarray
    parameter_nodes: np.ndarray
    normals: dict  # 2D node -> frozen unit normal
    layers: int
    decay_radius: int
    movable: np.ndarray = field(repr=False, default=None)

    @property
    def n_params(self) -> int:
        return self.G.shape[1]

    @property
    def n2d(self) -> int:
        return self.G.shape[0] // 2

    def displacement2d(self, p: np.ndarray) -> np.ndarray:
        return (self.G @ np.asarray(p, float)).reshape(-1, 2)

    def positions(self, p: np.ndarray) -> np.ndarray:
        X = self.base_nodes.copy()
        X[:, :2] += np.tile(self.displacement2d(p), (self.layers + 1, 1))
        return X

    def full_matrix(self) -> sp.csr_matrix:
        """(3 N, n_p) matrix of dX/dp over all 3D node coordinates."""
        G = self.G.tocoo()
        node, comp = G.row // 2, G.row % 2
        rows, cols, vals = [], [], []
        for k in range(self.layers + 1):
            rows.append(3 * (node + k * self.n2d) + comp)
            cols.append(G.col)
            vals.append(G.data)
        n = 3 * len(self.base_nodes)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, self.n_params))

    def pullback(self, grad_nodes: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. node coordinates (N, 3) to parameters."""
        g2 = grad_nodes[:, :2].reshape(self.layers + 1, self.n2d, 2).sum(axis=0)
        return self.G.T @ g2.ravel()


def _node_adjacency(quads: np.ndarray, n: int) -> list:
    nbrs = [set() for _ in range(n)]
    for q in quads:
        for a, b in zip(q, np.roll(q, -1)):
            nbrs[a].add(int(b))
            nbrs[b].add(int(a))
    return [sorted(s) for s in nbrs]


def movable_nodes(mesh: ExtrudedMesh, regions) -> np.ndarray:
    """2D nodes whose every incident quad belongs to a movable region."""
    ok = np.isin(mesh.quad_tags, list(regions))
    flag = np.ones(mesh.n2d, dtype=bool)
    flag[np.unique(mesh.quads[~ok])] = False
    touched = np.zeros(mesh.n2d, dtype=bool)
    touched[np.unique(mesh.quads)] = True
    return flag & touched


def build_morph_operator(
    mesh: ExtrudedMesh,
    symmetry: SymmetryMap | None = None,
    movable_regions=("spring",),
    decay_radius: int = 3,
) -> MorphOperator:
    """Assemble the linear map from parameters to node displacements."""
    bn = mesh.boundary_normals()
    normals = {int(i): bn.normals[k] for k, i in enumerate(bn.nodes)}
    movable = movable_nodes(mesh, movable_regions)
    on_boundary = np.zeros(mesh.n2d, dtype=bool)
    on_boundary[bn.nodes] = True
    adjacency = _node_adjacency(mesh.quads, mesh.n2d)
    loop_of, pos_in_loop = {}, {}
    for li, loop in enumerate(mesh.loops):
        for k, i in enumerate(loop):
            loop_of[int(i)], pos_in_loop[int(i)] = li, k

    candidates = symmetry.master if symmetry is not None else np.sort(bn.nodes)
    params = np.array([int(i) for i in candidates if movable[i]], dtype=int)
    for i in params:
        if int(i) not in normals:
            raise DesignError(f"movable node {i} has no normal")
    R = int(decay_radius)
    slope = 1.0 / (R + 1)

    rows, cols, vals = [], [], []
    for j, node in enumerate(params):
        seeds = symmetry.orbit(node) if symmetry is not None else [int(node)]
        disp = {}
        for s in seeds:
            loop = mesh.loops[loop_of[s]]
            n_loop, k0 = len(loop), pos_in_loop[s]
            # boundary hops, both directions, nearest hop wins
            hop = {}
            for h in range(-R, R + 1):
                i = int(loop[(k0 + h) % n_loop])
                if movable[i]:
                    hop[i] = min(hop.get(i, R + 1), abs(h))
            # interior dragging: multi-source BFS through interior movable nodes
            best = {i: (h, i) for i, h in hop.items()}
            queue = deque(sorted(best, key=lambda i: (best[i][0], i)))
            while queue:
                i = queue.popleft()
                h, src = best[i]
                if h >= R:
                    continue
                for nb in adjacency[i]:
                    if on_boundary[nb] or not movable[nb]:
                        continue
                    cand = (h + 1, src)
                    if nb not in best or cand < best[nb]:
                        best[nb] = cand
                        queue.append(nb)
            for i, (h, src) in best.items():
                if not movable[i] or h > R:
                    continue
                w = 1.0 - h * slope
                d = w * normals[src]
                disp[i] = disp.get(i, 0.0) + d
        for i in sorted(disp):
            for c in range(2):
                if disp[i][c] != 0.0:
                    rows.append(2 * i + c)
                    cols.append(j)
                    vals.append(disp[i][c])
    G = sp.csc_matrix((vals, (rows, cols)), shape=(2 * mesh.n2d, len(params)))
    return MorphOperator(G, mesh.nodes.copy(), params, normals, mesh.layers, R, movable)


def apply_design(mesh: ExtrudedMesh, morph: MorphOperator, p: np.ndarray, check: bool = True) -> ExtrudedMesh:
    """Mesh with node positions X0 + G p; raises on element inversion."""
    p = np.asarray(p, dtype=float)
    if p.shape != (morph.n_params,):
        raise DesignError(f"expected {morph.n_params} parameters, got {p.shape}")
    X = morph.positions(p)
    new = mesh.with_nodes(X, check=False)
    if check:
        try:
            new.check_jacobians()
        except ElementInversionError as exc:
            raise ElementInversionError(exc.elements, f"{exc}; most influential parameters: {blame(mesh, morph, exc.elements)}") from None
    return new


def blame(mesh: ExtrudedMesh, morph: MorphOperator, elements, top: int = 5) -> list:
    """Parameters with the largest influence on the given elements."""
    nodes2d = np.unique(mesh.elements[np.asarray(elements)] % mesh.n2d)
    rows = np.concatenate([2 * nodes2d, 2 * nodes2d + 1])
    infl = np.asarray(abs(morph.G[rows]).sum(axis=0)).ravel()
    order = np.argsort(-infl, kind="stable")[:top]
    return [int(j) for j in order if infl[j] > 0]


def node_position_sensitivity(morph: MorphOperator, j: int) -> sp.csc_matrix:
    """Column dX/dp_j over all 3D node coordinates (3 N x 1, sparse)."""
    return morph.full_matrix()[:, j].tocsc()
