"""Geometrically nonlinear 3-wave modal coupling coefficients.

``alpha[n, m, l]`` is the coefficient of ``q_n q_m q_l`` contributed by
``int eps_n^T D eta_ml dV`` when the displacement is expanded in
mass-normalized modes.  Units are 1/(sqrt(kg) m s^2).
"""

from __future__ import annotations

import csv
import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .eigen import ModalBasis
from .fem import Material, MeshGeometry, SystemMatrices, element_fields, linear_strain, nonlinear_strain
from .mesh import ExtrudedMesh


class StaleBasisError(ValueError):
    pass


class MissingEntryError(KeyError):
    pass


def mesh_key(mesh: ExtrudedMesh) -> str:
    return hashlib.sha1(np.ascontiguousarray(mesh.nodes).tobytes()).hexdigest()


class ModalFields:
    """Per-mode displacement gradients and stresses at all Gauss points.

    Caches are keyed by mode label; the same object serves coupling values
    and their sensitivities within one design iteration.
    """

    def __init__(self, mesh: ExtrudedMesh, material: Material, system: SystemMatrices, basis: ModalBasis, geom: MeshGeometry | None = None, key: str | None = None):
        if key is not None and key != mesh_key(mesh):
            raise StaleBasisError("modal basis was computed on a different mesh")
        self.mesh, self.material, self.system, self.basis = mesh, material, system, basis
        self.geom = geom or MeshGeometry.of(mesh)
        self._U, self._H, self._S = {}, {}, {}

    def U(self, label) -> np.ndarray:
        if label not in self._U:
            self._U[label] = element_fields(self.mesh, self.system.expand(self.basis.vector(label)))
        return self._U[label]

    def H(self, label) -> np.ndarray:
        if label not in self._H:
            self._H[label] = self.geom.gradients(self.U(label))
        return self._H[label]

    def stress(self, label) -> np.ndarray:
        """Linear stress tensor of a mode, C eps_n."""
        if label not in self._S:
            self._S[label] = self.material.stress(linear_strain(self.H(label)))
        return self._S[label]

    def alpha_density(self, n, m, l) -> np.ndarray:
        """Integrand eps_n : C : eta_ml at every Gauss point, (E, P)."""
        eta = nonlinear_strain(self.H(m), self.H(l))
        return np.einsum("epkl,epkl->ep", self.stress(n), eta)

    def alpha(self, n, m, l) -> float:
        if self.basis.index(m) > self.basis.index(l):
            m, l = l, m
        per_element = np.einsum("ep,ep->e", self.geom.wdet, self.alpha_density(n, m, l))
        return float(np.sum(np.sort(per_element)))


def alpha(mesh: ExtrudedMesh, material: Material, system: SystemMatrices, basis: ModalBasis, n, m, l) -> float:
    """Single coupling coefficient alpha_{n,m,l}."""
    return ModalFields(mesh, material, system, basis).alpha(n, m, l)


# ----------------------------------------------------------------------------
# aggregates as linear combinations of alpha entries


def tilde_terms(n, m, l) -> dict:
    """alpha~_{n,m,l} = alpha_{n,m,l} + alpha_{l,n,m} + alpha_{m,l,n}."""
    terms = {}
    for t in ((n, m, l), (l, n, m), (m, l, n)):
        terms[t] = terms.get(t, 0.0) + 1.0
    return terms


def bar_terms(d, a, b) -> dict:
    """alpha-bar_{d,a,b} = alpha~_{d,a,b} + alpha~_{d,b,a}."""
    terms = tilde_terms(d, a, b)
    for t, c in tilde_terms(d, b, a).items():
        terms[t] = terms.get(t, 0.0) + c
    return terms


def aggregate_terms(kind: str, idx) -> dict:
    if kind == "tilde":
        return tilde_terms(*idx)
    if kind == "bar":
        return bar_terms(*idx)
    if kind == "alpha":
        return {tuple(idx): 1.0}
    raise ValueError(f"unknown aggregate kind {kind!r}")


@dataclass(frozen=True)
class CouplingAggregate:
    kind: str  # "tilde" | "bar" | "alpha"
    indices: tuple
    value: float = float("nan")

    @property
    def terms(self) -> dict:
        return aggregate_terms(self.kind, self.indices)

    @property
    def name(self) -> str:
        return "{}[{}]".format(self.kind, ",".join(str(i) for i in self.indices))


@dataclass
class CouplingTensor:
    """Sparse map (n, m, l) -> alpha for one modal basis."""

    entries: dict = field(default_factory=dict)
    modeset_hash: str = ""

    def __getitem__(self, triple) -> float:
        n, m, l = triple
        for key in ((n, m, l), (n, l, m)):
            if key in self.entries:
                return self.entries[key]
        raise MissingEntryError(f"alpha{tuple(triple)} not computed")

    def require(self, basis: ModalBasis) -> None:
        """Raise ``StaleBasisError`` unless the tensor was built from ``basis``."""
        if self.modeset_hash != basis_hash(basis):
            raise StaleBasisError("coupling tensor was computed from a different modal basis")

    def evaluate(self, kind: str, idx) -> float:
        return float(sum(c * self[t] for t, c in aggregate_terms(kind, idx).items()))

    def cubic_energy(self, q: dict) -> float:
        """sum over all index triples of alpha_{n,m,l} q_n q_m q_l."""
        labels = list(q)
        return float(
            sum(self[(n, m, l)] * q[n] * q[m] * q[l] for n, m, l in itertools.product(labels, repeat=3))
        )


def basis_hash(basis: ModalBasis) -> str:
    return hashlib.sha1(np.ascontiguousarray(basis.vectors).tobytes()).hexdigest()[:16]


def compute_tensor(fields: ModalFields, triples) -> CouplingTensor:
    """Coupling tensor holding every requested triple (one sweep per triple)."""
    entries = {}
    for n, m, l in triples:
        if (n, m, l) in entries or (n, l, m) in entries:
            continue
        v = fields.alpha(n, m, l)
        entries[(n, m, l)] = v
        entries[(n, l, m)] = v
    return CouplingTensor(entries, basis_hash(fields.basis))


def full_tensor(fields: ModalFields, labels) -> CouplingTensor:
    return compute_tensor(fields, itertools.product(labels, repeat=3))


def alpha_tilde(tensor: CouplingTensor, n, m, l) -> float:
    return tensor.evaluate("tilde", (n, m, l))


def alpha_bar(tensor: CouplingTensor, d, a, b) -> float:
    return tensor.evaluate("bar", (d, a, b))


def write_coupling_report(path, rows) -> None:
    """CSV with columns iter, kind, n, m, l, value."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "kind", "n", "m", "l", "value"])
        for it, kind, (n, m, l), value in rows:
            w.writerow([it, kind, n, m, l, repr(float(value))])
