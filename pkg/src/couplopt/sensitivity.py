"""Design sensitivities: matrix derivatives, coupling partials and the adjoint.

Geometric derivatives are formed with respect to node coordinates and then
pulled back through the morph operator; for a linear morph this equals the
per-parameter chain rule through dB/dp and d(det J)/dp.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coupling import CouplingTensor, ModalFields, aggregate_terms
from .eigen import ModalBasis
from .fem import (
    SHAPE_N,
    Material,
    MeshGeometry,
    SystemMatrices,
    _assemble,
    bilinear_stiffness_integrand,
    coordinate_gradient,
    dof_map_for,
    element_fields,
    field_gradient,
    linear_strain,
    mass_integrand,
    nonlinear_strain,
    strain_displacement,
)
from .mesh import ExtrudedMesh
from .shape_param import MorphOperator

log = logging.getLogger(__name__)


class SensitivityError(RuntimeError):
    pass


class DegenerateModeError(SensitivityError):
    pass


# ----------------------------------------------------------------------------
# matrix sensitivities for a single parameter


@dataclass
class MatrixSensitivities:
    """Derivatives of element quantities w.r.t. one parameter.

    Only the elements in ``elements`` are affected; ``dK``/``dM`` are the
    assembled free-DOF matrices.
    """

    elements: np.ndarray
    dG: np.ndarray  # (e, P, 8, 3)  derivative of B^e (transposed layout)
    dB_eps: np.ndarray  # (e, P, 6, 24)
    ddetJ: np.ndarray  # (e, P)
    dKe: np.ndarray  # (e, 24, 24)
    dMe: np.ndarray  # (e, 24, 24)
    dK: sp.csr_matrix
    dM: sp.csr_matrix


def _stiffness_bilinear(wdet, Ga, Gb, material):
    lam, mu = material.lame
    t1 = np.einsum("ep,epai,epbj->eaibj", wdet, Ga, Gb)
    t2 = np.einsum("ep,epaj,epbi->eaibj", wdet, Ga, Gb)
    S = np.einsum("ep,epak,epbk->eab", wdet, Ga, Gb)
    Ke = lam * t1 + mu * t2 + mu * S[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]
    return Ke.reshape(-1, 24, 24)


def geometry_derivative(geom: MeshGeometry, elements: np.ndarray, dXe: np.ndarray):
    """(dG, d det J) for element node-coordinate perturbations dXe (e, 8, 3)."""
    G = geom.G[elements]
    dG = -np.einsum("epak,ebk,epbm->epam", G, dXe, G)
    ddet = geom.detJ[elements] * np.einsum("epak,eak->ep", G, dXe)
    return dG, ddet


def matrix_sensitivity(mesh: ExtrudedMesh, material: Material, morph: MorphOperator, j: int, geom: MeshGeometry | None = None, system: SystemMatrices | None = None) -> MatrixSensitivities:
    """Analytic dK/dp_j and dM/dp_j through the isoparametric map."""
    geom = geom or MeshGeometry.of(mesh)
    col = morph.G[:, j].toarray().ravel().reshape(-1, 2)
    dX = np.zeros((mesh.n_nodes, 3))
    dX[:, :2] = np.tile(col, (mesh.layers + 1, 1))
    moved = np.any(dX[mesh.elements] != 0, axis=(1, 2))
    elements = np.nonzero(moved)[0]
    dXe = dX[mesh.elements[elements]]
    dG, ddet = geometry_derivative(geom, elements, dXe)
    wdet = geom.wdet[elements]
    dwdet = ddet * (geom.wdet[elements] / geom.detJ[elements])
    G = geom.G[elements]
    dKe = _stiffness_bilinear(dwdet, G, G, material)
    dKe += _stiffness_bilinear(wdet, dG, G, material) + _stiffness_bilinear(wdet, G, dG, material)
    Mab = material.density * np.einsum("ep,pa,pb->eab", dwdet, SHAPE_N, SHAPE_N)
    dMe = (Mab[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]).reshape(-1, 24, 24)
    n = 3 * mesh.n_nodes
    dofs = geom.dofs[elements]
    dK = _assemble(dKe, dofs, n) if len(elements) else sp.csr_matrix((n, n))
    dM = _assemble(dMe, dofs, n) if len(elements) else sp.csr_matrix((n, n))
    if system is None:
        free, _ = dof_map_for(mesh)
    else:
        free = system.free
    dK = dK[free][:, free].tocsr()
    dM = dM[free][:, free].tocsr()
    dB = strain_displacement(dG) if len(elements) else np.zeros((0, 8, 6, 24))
    return MatrixSensitivities(elements, dG, dB, ddet, dKe, dMe, dK, dM)


def frequency_sensitivity(basis: ModalBasis, label, dK, dM, degeneracy_check: bool = True):
    """(d omega^2/dp, df/dp) of a non-degenerate mode for given dK, dM."""
    i = basis.index(label)
    if degeneracy_check:
        for a, b in basis.degenerate_pairs():
            if i in (a, b):
                raise DegenerateModeError(f"mode {label!r} is degenerate with mode {b if i == a else a}")
    phi = basis.vectors[:, i]
    w2 = basis.omega2[i]
    dw2 = float(phi @ (dK @ phi) - w2 * (phi @ (dM @ phi)))
    f = np.sqrt(w2) / (2 * np.pi)
    return dw2, dw2 / (8 * np.pi**2 * f)


# ----------------------------------------------------------------------------
# node-coordinate gradients of bilinear forms


def form_gradient(mesh: ExtrudedMesh, material: Material, geom: MeshGeometry, Ua, Ub, k_coef: float, m_coef: float) -> np.ndarray:
    """d/dX of k_coef * a^T K b + m_coef * a^T M b, holding a and b fixed."""
    if k_coef != 0.0:
        Ha, Hb = geom.gradients(Ua), geom.gradients(Ub)
        f, F = bilinear_stiffness_integrand(material, Ha, Hb, Ua, Ub)
        f, F = k_coef * f, k_coef * F
    else:
        f, F = 0.0, None
    if m_coef != 0.0:
        f = f + m_coef * mass_integrand(material, Ua, Ub)
    return coordinate_gradient(mesh, geom, np.broadcast_to(f, geom.wdet.shape), F)


def omega2_node_gradient(fields: ModalFields, label) -> np.ndarray:
    """d(omega^2)/dX for a tracked mode, (N, 3)."""
    w2 = fields.basis.omega2[fields.basis.index(label)]
    U = fields.U(label)
    return form_gradient(fields.mesh, fields.material, fields.geom, U, U, 1.0, -w2)


def frequency_gradient(fields: ModalFields, label, morph: MorphOperator | None = None):
    """df/dX (N, 3), or df/dp when ``morph`` is given."""
    f = fields.basis.frequency(label)
    g = omega2_node_gradient(fields, label) / (8 * np.pi**2 * f)
    return morph.pullback(g) if morph is not None else g


# ----------------------------------------------------------------------------
# partial derivatives of scalar functions c(p, f, phi)


@dataclass
class Partials:
    """Value and partial derivatives of a function c(p, f_i, phi_i).

    ``d_nodes`` is the explicit derivative w.r.t. node coordinates (N, 3);
    ``d_phi`` and ``d_f`` map mode labels to free-DOF vectors and scalars.
    """

    value: float
    d_nodes: np.ndarray | None = None
    d_phi: dict = field(default_factory=dict)
    d_f: dict = field(default_factory=dict)

    def scaled(self, s: float, value: float | None = None) -> "Partials":
        return Partials(
            s * self.value if value is None else value,
            None if self.d_nodes is None else s * self.d_nodes,
            {k: s * v for k, v in self.d_phi.items()},
            {k: s * v for k, v in self.d_f.items()},
        )


def alpha_partials(fields: ModalFields, n, m, l, coef: float = 1.0, acc=None):
    """Partials of coef * alpha_{n,m,l}: d/df = 0, d/dX and d/dphi per slot.

    ``acc`` (optional) is an accumulator dict with keys ``f``, ``F`` and
    ``dH`` that sums several terms before the costly reductions.
    """
    own = acc is None
    if own:
        acc = {"value": 0.0, "f": 0.0, "F": 0.0, "dH": {}}
    Hn, Hm, Hl = fields.H(n), fields.H(m), fields.H(l)
    Sn = fields.stress(n)
    eta = nonlinear_strain(Hm, Hl)
    f = np.einsum("epkl,epkl->ep", Sn, eta)
    dHn = fields.material.stress(eta)
    dHm = 0.5 * np.einsum("epik,epkj->epij", Hl, Sn)
    dHl = 0.5 * np.einsum("epik,epkj->epij", Hm, Sn)
    acc["value"] += coef * float(np.sum(np.sort(np.einsum("ep,ep->e", fields.geom.wdet, f))))
    acc["f"] = acc["f"] + coef * f
    for lab, U, dH in ((n, fields.U(n), dHn), (m, fields.U(m), dHm), (l, fields.U(l), dHl)):
        acc["F"] = acc["F"] + coef * np.einsum("eai,epik->epak", U, dH)
        acc["dH"][lab] = acc["dH"].get(lab, 0.0) + coef * dH
    if own:
        return finish_alpha_partials(fields, acc)
    return acc


def finish_alpha_partials(fields: ModalFields, acc) -> Partials:
    d_nodes = coordinate_gradient(fields.mesh, fields.geom, acc["f"], acc["F"])
    d_phi = {
        lab: fields.system.restrict(field_gradient(fields.mesh, fields.geom, dH))
        for lab, dH in acc["dH"].items()
    }
    d_f = {lab: 0.0 for lab in acc["dH"]}
    return Partials(acc["value"], d_nodes, d_phi, d_f)


def aggregate_partials(fields: ModalFields, kind: str, idx, tensor: CouplingTensor | None = None) -> Partials:
    """Partials of a coupling aggregate (sum of alpha entries).

    When ``tensor`` is given it must come from the same modal basis.
    """
    if tensor is not None:
        tensor.require(fields.basis)
    acc = {"value": 0.0, "f": 0.0, "F": 0.0, "dH": {}}
    for (n, m, l), c in sorted(aggregate_terms(kind, idx).items(), key=str):
        alpha_partials(fields, n, m, l, c, acc)
    return finish_alpha_partials(fields, acc)


def abs_partials(p: Partials) -> Partials:
    """|c| with subgradient sign(0) = 0."""
    s = float(np.sign(p.value))
    return p.scaled(s, abs(p.value))


def eigvec_ratio_partials(basis: ModalBasis, label, mask_x: np.ndarray, mask_y: np.ndarray, floor: float = 1e-30) -> Partials:
    """||phi_x|| / ||phi_y|| over masked DOFs and its derivative w.r.t. phi_d.

    ``mask_x``/``mask_y`` select the x and y free DOFs of the electrode region.
    """
    phi = basis.vector(label)
    px = np.where(mask_x, phi, 0.0)
    py = np.where(mask_y, phi, 0.0)
    nx, ny = np.linalg.norm(px), np.linalg.norm(py)
    if ny == 0.0:
        raise SensitivityError(f"mode {label!r} has no y-motion in the electrode region")
    nx_f = max(nx, floor)
    grad = px / (nx_f * ny) - py * nx / ny**3
    return Partials(nx / ny, None, {label: grad}, {label: 0.0})


# ----------------------------------------------------------------------------
# adjoint via Nelson's method


@dataclass
class AdjointSolution:
    lam: dict  # label -> free vector
    eta: dict  # label -> float
    residuals: dict = field(default_factory=dict)


class NelsonSolver:
    """Solves (K - w^2 M) lam = r, phi^T M lam = t for each mode.

    One factorization of the pivoted matrix per mode is reused for every
    right-hand side of the current design.
    """

    def __init__(self, K, M, basis: ModalBasis):
        self.K, self.M, self.basis = sp.csr_matrix(K), sp.csr_matrix(M), basis
        self._lu = {}

    def _check_simple(self, label):
        i = self.basis.index(label)
        for a, b in self.basis.degenerate_pairs():
            if i in (a, b):
                raise DegenerateModeError(f"mode {label!r} is degenerate (modes {a}, {b}); refusing to differentiate")

    def _factor(self, label):
        if label not in self._lu:
            self._check_simple(label)
            i = self.basis.index(label)
            phi = self.basis.vectors[:, i]
            r = int(np.argmax(np.abs(phi)))
            keep = np.ones(len(phi), dtype=bool)
            keep[r] = False
            A = (self.K - self.basis.omega2[i] * self.M).tocsr()
            Ar = A[keep][:, keep].tocsc()
            try:
                lu = spla.splu(Ar)
            except RuntimeError as exc:
                raise DegenerateModeError(f"reduced system for mode {label!r} is singular: {exc}") from exc
            self._lu[label] = (lu, keep, r)
        return self._lu[label]

    def solve(self, label, rhs: np.ndarray, target: float, check: bool = True):
        """Return lam with (K - w^2 M) lam = rhs and phi^T M lam = target."""
        self._check_simple(label)
        i = self.basis.index(label)
        phi = self.basis.vectors[:, i]
        w2 = self.basis.omega2[i]
        rhs_norm = np.linalg.norm(rhs)
        if check and abs(phi @ rhs) > 1e-9 * np.linalg.norm(phi) * max(rhs_norm, 1e-300) and rhs_norm > 0:
            raise SensitivityError(
                f"adjoint right-hand side for mode {label!r} violates solvability: |phi^T r| = {abs(phi @ rhs):.3e}"
            )
        if rhs_norm == 0.0:
            v = np.zeros_like(phi)
        else:
            lu, keep, r = self._factor(label)
            v = np.zeros_like(phi)
            v[keep] = lu.solve(rhs[keep])
        Mphi = self.M @ phi
        s = target - Mphi @ v
        lam = v + s * phi
        res15 = (self.K @ lam - w2 * (self.M @ lam)) - rhs
        scale = max(rhs_norm, np.linalg.norm(self.K @ lam), 1e-300)
        res15_rel = float(np.linalg.norm(res15) / scale)
        res16 = float(abs(Mphi @ lam - target))
        lam_m = float(np.sqrt(abs(lam @ (self.M @ lam))))
        return lam, res15_rel, res16, lam_m


def adjoint_variables(solver: NelsonSolver, partials: Partials) -> AdjointSolution:
    """eta_i = -phi_i^T dc/dphi_i and lam_i for every mode c depends on."""
    sol = AdjointSolution({}, {}, {})
    labels = sorted(set(partials.d_phi) | set(partials.d_f), key=str)
    for label in labels:
        i = solver.basis.index(label)
        phi = solver.basis.vectors[:, i]
        dphi = partials.d_phi.get(label, np.zeros_like(phi))
        df = partials.d_f.get(label, 0.0)
        eta = -float(phi @ dphi)
        rhs = -dphi - eta * (solver.M @ phi)
        omega = np.sqrt(solver.basis.omega2[i])
        target = df / (4 * np.pi * omega)
        lam, r15, r16, lam_m = solver.solve(label, rhs, target)
        sol.lam[label], sol.eta[label] = lam, eta
        sol.residuals[label] = (r15, r16, lam_m)
    return sol


def total_node_gradient(fields: ModalFields, partials: Partials, solver: NelsonSolver) -> np.ndarray:
    """dc/dX via the adjoint: explicit part plus per-mode residual terms."""
    sol = adjoint_variables(solver, partials)
    g = np.zeros((fields.mesh.n_nodes, 3)) if partials.d_nodes is None else partials.d_nodes.copy()
    for label in sol.lam:
        lam, eta = sol.lam[label], sol.eta[label]
        if not np.any(lam) and eta == 0.0:
            continue
        w2 = fields.basis.omega2[fields.basis.index(label)]
        Ul = element_fields(fields.mesh, fields.system.expand(lam))
        Up = fields.U(label)
        g += form_gradient(fields.mesh, fields.material, fields.geom, Ul, Up, 1.0, -w2)
        if eta != 0.0:
            g += form_gradient(fields.mesh, fields.material, fields.geom, Up, Up, 0.0, 0.5 * eta)
    return g


def adjoint_total_sensitivity(fields: ModalFields, partials: Partials, solver: NelsonSolver, morph: MorphOperator) -> np.ndarray:
    """Full gradient dc/dp."""
    return morph.pullback(total_node_gradient(fields, partials, solver))
