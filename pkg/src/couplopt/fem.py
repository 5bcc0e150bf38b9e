"""Hex8 kinematics, assembly and geometrically nonlinear strain energy.

Voigt order is (xx, yy, zz, yz, xz, xy) with engineering shear strains,
shared by every B-matrix and by ``Material.D``.  Element DOFs are node-major
(``3 * a + i`` for node ``a``, direction ``i``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import HEX_CORNERS, ElementInversionError, ExtrudedMesh

_g = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = HEX_CORNERS * _g
GAUSS_WEIGHTS = np.ones(8)

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))


def _shape_functions(pts):
    c = HEX_CORNERS
    xi, eta, zeta = pts[:, 0:1], pts[:, 1:2], pts[:, 2:3]
    N = (1 + xi * c[:, 0]) * (1 + eta * c[:, 1]) * (1 + zeta * c[:, 2]) / 8
    dN = np.stack(
        [
            c[:, 0] * (1 + eta * c[:, 1]) * (1 + zeta * c[:, 2]) / 8,
            c[:, 1] * (1 + xi * c[:, 0]) * (1 + zeta * c[:, 2]) / 8,
            c[:, 2] * (1 + xi * c[:, 0]) * (1 + eta * c[:, 1]) / 8,
        ],
        axis=-1,
    )
    return N, dN


SHAPE_N, SHAPE_DN = _shape_functions(GAUSS_POINTS)  # (8 gp, 8 nodes), (8, 8, 3)


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 160e9
    poisson_ratio: float = 0.22
    density: float = 2320.0

    def __post_init__(self):
        if self.youngs_modulus <= 0 or self.density <= 0:
            raise ValueError("Young's modulus and density must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in [0, 0.5)")

    @property
    def lame(self):
        E, nu = self.youngs_modulus, self.poisson_ratio
        return E * nu / ((1 + nu) * (1 - 2 * nu)), E / (2 * (1 + nu))

    @property
    def D(self) -> np.ndarray:
        lam, mu = self.lame
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] += 2 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D

    def stress(self, strain: np.ndarray) -> np.ndarray:
        """Stress tensor from a (symmetric) strain tensor, last two axes 3x3."""
        lam, mu = self.lame
        tr = np.trace(strain, axis1=-2, axis2=-1)
        return 2 * mu * strain + lam * tr[..., None, None] * np.eye(3)


# ----------------------------------------------------------------------------
# Voigt helpers


def voigt(t: np.ndarray, engineering: bool = True) -> np.ndarray:
    """Symmetric tensors (..., 3, 3) -> Voigt vectors (..., 6)."""
    f = 2.0 if engineering else 1.0
    return np.stack(
        [t[..., 0, 0], t[..., 1, 1], t[..., 2, 2], f * t[..., 1, 2], f * t[..., 0, 2], f * t[..., 0, 1]],
        axis=-1,
    )


def linear_strain(H: np.ndarray) -> np.ndarray:
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def nonlinear_strain(Ha: np.ndarray, Hb: np.ndarray) -> np.ndarray:
    """Symmetric bilinear Green-Lagrange part: 1/4 (Ha^T Hb + Hb^T Ha)."""
    P = np.einsum("...ik,...il->...kl", Ha, Hb)
    return 0.25 * (P + np.swapaxes(P, -1, -2))


# ----------------------------------------------------------------------------
# element kinematics


@dataclass
class ElementQuadratureData:
    """Quadrature data of one hex8 element.

    ``B[p]`` is the 3x8 matrix of physical shape-function derivatives
    (row k = d/dx_k), ``B_eps[p]`` the 6x24 linear strain-displacement matrix.
    """

    B: np.ndarray  # (8, 3, 8)
    B_eps: np.ndarray  # (8, 6, 24)
    J: np.ndarray  # (8, 3, 3)
    detJ: np.ndarray  # (8,)
    weights: np.ndarray  # (8,)
    gather: np.ndarray  # (24,) global DOF indices (the map L^e)


def strain_displacement(G: np.ndarray) -> np.ndarray:
    """B_eps (..., 6, 24) from shape-function gradients G (..., 8, 3)."""
    shape = G.shape[:-2]
    B = np.zeros(shape + (6, 8, 3))
    B[..., 0, :, 0] = G[..., 0]
    B[..., 1, :, 1] = G[..., 1]
    B[..., 2, :, 2] = G[..., 2]
    B[..., 3, :, 1] = G[..., 2]
    B[..., 3, :, 2] = G[..., 1]
    B[..., 4, :, 0] = G[..., 2]
    B[..., 4, :, 2] = G[..., 0]
    B[..., 5, :, 0] = G[..., 1]
    B[..., 5, :, 1] = G[..., 0]
    return B.reshape(shape + (6, 24))


def element_kinematics(mesh: ExtrudedMesh, element: int, material: Material | None = None) -> ElementQuadratureData:
    X = mesh.nodes[mesh.elements[element]]
    J = np.einsum("ak,pal->pkl", X, SHAPE_DN)
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise ElementInversionError([element])
    G = np.einsum("pal,plk->pak", SHAPE_DN, np.linalg.inv(J))
    gather = (3 * mesh.elements[element][:, None] + np.arange(3)).ravel()
    return ElementQuadratureData(np.swapaxes(G, 1, 2), strain_displacement(G), J, det, GAUSS_WEIGHTS.copy(), gather)


def nonlinear_strain_matrix(G: np.ndarray, phi_e: np.ndarray) -> np.ndarray:
    """B_eta(phi) (6x24) at one quadrature point.

    ``G`` is (8, 3) physical shape gradients, ``phi_e`` the 24 element DOFs.
    ``0.5 * B_eta(phi_m) @ phi_l`` is the nonlinear strain of modes m, l.
    """
    H = phi_e.reshape(8, 3).T @ G  # displacement gradient, H[i, k] = d u_i / d x_k
    B = np.zeros((6, 8, 3))
    # row for pair (k, l) acts on the second field psi: sum_i H_ik dpsi_i/dx_l + H_il dpsi_i/dx_k
    for r, (k, l) in enumerate(VOIGT_PAIRS):
        if k == l:
            B[r] = G[:, k][:, None] * H[:, k][None, :]
        else:
            B[r] = G[:, l][:, None] * H[:, k][None, :] + G[:, k][:, None] * H[:, l][None, :]
    return B.reshape(6, 24)


# ----------------------------------------------------------------------------
# vectorized geometry


@dataclass
class MeshGeometry:
    """Shape-function gradients and weighted Jacobians for all elements."""

    G: np.ndarray  # (E, P, 8, 3)
    detJ: np.ndarray  # (E, P)
    wdet: np.ndarray  # (E, P)
    dofs: np.ndarray = field(repr=False, default=None)  # (E, 24)

    @classmethod
    def of(cls, mesh: ExtrudedMesh) -> "MeshGeometry":
        X = mesh.nodes[mesh.elements]
        J = np.einsum("eak,pal->epkl", X, SHAPE_DN)
        det = np.linalg.det(J)
        bad = np.nonzero(np.any(det <= 0, axis=1))[0]
        if len(bad):
            raise ElementInversionError(bad)
        G = np.einsum("pal,eplk->epak", SHAPE_DN, np.linalg.inv(J))
        dofs = (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(len(mesh.elements), 24)
        return cls(G, det, det * GAUSS_WEIGHTS, dofs)

    def gradients(self, Ue: np.ndarray) -> np.ndarray:
        """Displacement gradients H (E, P, 3, 3) from element displacements (E, 8, 3)."""
        return np.einsum("eai,epak->epik", Ue, self.G)


def element_fields(mesh: ExtrudedMesh, u_full: np.ndarray) -> np.ndarray:
    """(E, 8, 3) element nodal displacements from a full DOF vector."""
    return u_full.reshape(-1, 3)[mesh.elements]


@dataclass
class SystemMatrices:
    """Stiffness and mass restricted to free DOFs."""

    K: sp.csr_matrix
    M: sp.csr_matrix
    free: np.ndarray  # global DOF index of each free DOF
    dof_map: np.ndarray  # global DOF -> free index or -1
    n_full: int

    @property
    def n(self) -> int:
        return len(self.free)

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        """Free-DOF vector(s) -> full DOF vector(s) with zeros at fixed DOFs."""
        u_free = np.asarray(u_free)
        out = np.zeros((self.n_full,) + u_free.shape[1:], dtype=u_free.dtype)
        out[self.free] = u_free
        return out

    def restrict(self, u_full: np.ndarray) -> np.ndarray:
        return np.asarray(u_full)[self.free]


def element_stiffness(geom: MeshGeometry, material: Material) -> np.ndarray:
    lam, mu = material.lame
    t1 = np.einsum("ep,epai,epbj->eaibj", geom.wdet, geom.G, geom.G)
    S = np.einsum("eaibi->eab", t1)
    Ke = lam * t1 + mu * t1.transpose(0, 1, 4, 3, 2)
    Ke += mu * S[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]
    return Ke.reshape(-1, 24, 24)


def element_mass(geom: MeshGeometry, material: Material) -> np.ndarray:
    Mab = material.density * np.einsum("ep,pa,pb->eab", geom.wdet, SHAPE_N, SHAPE_N)
    return (Mab[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]).reshape(-1, 24, 24)


def _assemble(values: np.ndarray, dofs: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    A = sp.coo_matrix((values.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def assemble_full(mesh: ExtrudedMesh, material: Material, geom: MeshGeometry | None = None):
    """Unconstrained K and M over all 3N DOFs."""
    geom = geom or MeshGeometry.of(mesh)
    n = 3 * mesh.n_nodes
    K = _assemble(element_stiffness(geom, material), geom.dofs, n)
    M = _assemble(element_mass(geom, material), geom.dofs, n)
    return ((K + K.T) * 0.5).tocsr(), ((M + M.T) * 0.5).tocsr()


def dof_map_for(mesh: ExtrudedMesh, fixed_nodes=None):
    fixed_nodes = mesh.fixed_nodes if fixed_nodes is None else np.asarray(fixed_nodes, int)
    n = 3 * mesh.n_nodes
    is_fixed = np.zeros(n, dtype=bool)
    is_fixed[(3 * fixed_nodes[:, None] + np.arange(3)).ravel()] = True
    free = np.nonzero(~is_fixed)[0]
    dof_map = np.full(n, -1, dtype=int)
    dof_map[free] = np.arange(len(free))
    return free, dof_map


def assemble_system(mesh: ExtrudedMesh, material: Material, geom: MeshGeometry | None = None) -> SystemMatrices:
    """Consistent K and M with anchored DOFs eliminated."""
    if len(mesh.fixed_nodes) == 0:
        raise ValueError("mesh has no fixed nodes; K would be singular")
    K, M = assemble_full(mesh, material, geom)
    free, dof_map = dof_map_for(mesh)
    Kf = K[free][:, free].tocsr()
    Mf = M[free][:, free].tocsr()
    if len(free) and np.any(Mf.diagonal() <= 0):
        raise ValueError("mass matrix is singular (zero-density region)")
    return SystemMatrices(Kf, Mf, free, dof_map, 3 * mesh.n_nodes)


# ----------------------------------------------------------------------------
# strain energy


def strain_energy(
    mesh: ExtrudedMesh,
    material: Material,
    u: np.ndarray,
    system: SystemMatrices | None = None,
    geom: MeshGeometry | None = None,
    linear_only: bool = False,
) -> float:
    """Strain energy 1/2 int S:E dV with the full Green-Lagrange strain.

    ``u`` is a free-DOF vector when ``system`` is given, otherwise a full one.
    """
    geom = geom or MeshGeometry.of(mesh)
    u_full = system.expand(u) if system is not None else np.asarray(u)
    H = geom.gradients(element_fields(mesh, u_full))
    E = linear_strain(H)
    if not linear_only:
        E = E + 0.5 * np.einsum("...ik,...il->...kl", H, H)
    S = material.stress(E)
    dens = np.einsum("epkl,epkl->ep", S, E)
    per_element = 0.5 * np.einsum("ep,ep->e", geom.wdet, dens)
    return float(np.sum(np.sort(per_element)))


# ----------------------------------------------------------------------------
# shape derivatives with respect to node coordinates


def coordinate_gradient(mesh: ExtrudedMesh, geom: MeshGeometry, f: np.ndarray, F: np.ndarray | None) -> np.ndarray:
    """Gradient of sum_e sum_p W_p det(J) f w.r.t. all node coordinates.

    ``f`` (E, P) is the integrand value and ``F`` (E, P, 8, 3) its partial
    derivative with respect to the physical shape gradients G, holding
    nodal fields fixed.  Uses d(det J) = det J (G : dX) and
    dG = -G dX^T G.  Returns (N, 3).
    """
    g = geom.wdet[..., None, None] * f[..., None, None] * geom.G
    if F is not None:
        FtG = np.einsum("epam,epak->epmk", F, geom.G)
        g = g - geom.wdet[..., None, None] * np.einsum("epbm,epmk->epbk", geom.G, FtG)
    ge = g.sum(axis=1)  # (E, 8, 3)
    out = np.zeros((mesh.n_nodes, 3))
    np.add.at(out, mesh.elements, ge)
    return out


def field_gradient(mesh: ExtrudedMesh, geom: MeshGeometry, dfdH: np.ndarray) -> np.ndarray:
    """Full DOF gradient of sum W det(J) f given df/dH (E, P, 3, 3) for one field."""
    ge = np.einsum("ep,epik,epak->eai", geom.wdet, dfdH, geom.G)
    out = np.zeros((mesh.n_nodes, 3))
    np.add.at(out, mesh.elements, ge)
    return out.ravel()


def bilinear_stiffness_integrand(material: Material, Ha: np.ndarray, Hb: np.ndarray, Ua: np.ndarray, Ub: np.ndarray):
    """Integrand of a^T K b and its derivative w.r.t. G (for ``coordinate_gradient``)."""
    Sa = material.stress(linear_strain(Ha))
    Sb = material.stress(linear_strain(Hb))
    f = np.einsum("epkl,epkl->ep", Sa, linear_strain(Hb))
    F = np.einsum("eai,epik->epak", Ua, Sb) + np.einsum("eai,epik->epak", Ub, Sa)
    return f, F


def mass_integrand(material: Material, Ua: np.ndarray, Ub: np.ndarray) -> np.ndarray:
    """Integrand of a^T M b at each Gauss point (no G dependence)."""
    va = np.einsum("pa,eai->epi", SHAPE_N, Ua)
    vb = np.einsum("pa,eai->epi", SHAPE_N, Ub)
    return material.density * np.einsum("epi,epi->ep", va, vb)
