import itertools

import numpy as np
import pytest

from couplopt.coupling import (
    CouplingTensor,
    MissingEntryError,
    ModalFields,
    StaleBasisError,
    alpha_bar,
    alpha_tilde,
    bar_terms,
    compute_tensor,
    full_tensor,
    mesh_key,
    tilde_terms,
)
from couplopt.eigen import ModalBasis
from couplopt.fem import Material, assemble_system, strain_energy
from couplopt.mesh import CrossSection2D, extrude
from couplopt.sensitivity import aggregate_partials

UM = 1e-6


def test_alpha_symmetric_in_last_two_slots(small_beam):
    f = small_beam.fields
    for n, m, l in [(0, 1, 2), (3, 0, 5), (1, 1, 4)]:
        assert np.array_equal(f.alpha_density(n, m, l), f.alpha_density(n, l, m))
        assert f.alpha(n, m, l) == f.alpha(n, l, m)


def test_tensor_stores_both_orders(small_beam):
    t = compute_tensor(small_beam.fields, [(0, 1, 2)])
    assert t[(0, 1, 2)] == t[(0, 2, 1)]
    assert np.isfinite(t[(0, 1, 2)])


def quad_gauss_oracle(points, quads, fields2d, thickness, material, n, m, l):
    """Reduced in-plane quadrature of eps_n : C : eta_ml for z-independent fields."""
    lam, mu = material.lame
    g = 1 / np.sqrt(3)
    total = 0.0
    for quad in quads:
        X = points[quad]
        for xi, et in itertools.product((-g, g), repeat=2):
            dN = 0.25 * np.array(
                [[-(1 - et), -(1 - xi)], [(1 - et), -(1 + xi)], [(1 + et), (1 + xi)], [-(1 + et), (1 - xi)]]
            )
            J = X.T @ dN
            G = dN @ np.linalg.inv(J)
            H = {k: fields2d[k][quad].T @ G for k in (n, m, l)}
            eps = 0.5 * (H[n] + H[n].T)
            eta = 0.25 * (H[m].T @ H[l] + H[l].T @ H[m])
            total += np.linalg.det(J) * thickness * (lam * np.trace(eps) * np.trace(eta) + 2 * mu * np.sum(eps * eta))
    return total


def test_in_plane_fields_match_reduced_quadrature(rng):
    sec = CrossSection2D.from_rectangles(
        [(0.0, 0.0, 2 * UM, 4 * UM), (2 * UM, 0.0, 8 * UM, 4 * UM)], ["anchor", "spring"]
    )
    mesh = extrude(sec, 0.5 * UM, 2, 1 * UM, fix="all")
    # skew the interior nodes so Jacobians are not constant
    X = mesh.nodes.copy()
    free2d = np.nonzero(X[: mesh.n2d, 0] > 2.5 * UM)[0]
    X[mesh.column(free2d).ravel(), 1] += 0.1 * UM * np.sin(X[mesh.column(free2d).ravel(), 0] / UM)
    mesh = mesh.with_nodes(X)
    mat = Material()
    system = assemble_system(mesh, mat)
    fixed2d = np.unique(mesh.fixed_nodes % mesh.n2d)
    fields2d, vectors = {}, []
    for k in range(3):
        u2 = rng.standard_normal((mesh.n2d, 2))
        u2[fixed2d] = 0.0
        fields2d[k] = u2
        u3 = np.zeros((mesh.layers + 1, mesh.n2d, 3))
        u3[:, :, :2] = u2
        vectors.append(system.restrict(u3.ravel()))
    basis = ModalBasis(np.ones(3), np.column_stack(vectors), {0: 0, 1: 1, 2: 2})
    fields = ModalFields(mesh, mat, system, basis)
    for n, m, l in [(0, 1, 2), (1, 1, 1), (2, 0, 0)]:
        ref = quad_gauss_oracle(mesh.points2d, mesh.quads, fields2d, 0.5 * UM, mat, n, m, l)
        assert fields.alpha(n, m, l) == pytest.approx(ref, rel=1e-10)


def test_trilinearity(small_beam):
    m = small_beam
    V = m.basis.vectors
    triple = (0, 4, 5)  # not forced to zero by the beam symmetries
    base = m.fields.alpha(*triple)
    for slot, c in ((0, 2.5), (4, -0.7), (5, 3.0)):
        W = V.copy()
        W[:, slot] *= c
        scaled = ModalBasis(m.basis.omega2, W, m.basis.labels)
        assert ModalFields(m.mesh, m.material, m.system, scaled).alpha(*triple) == pytest.approx(c * base, rel=1e-12)
    # additivity in the first slot
    W = V.copy()
    W[:, 0] = V[:, 0] + V[:, 1]
    summed = ModalFields(m.mesh, m.material, m.system, ModalBasis(m.basis.omega2, W, m.basis.labels)).alpha(*triple)
    assert summed == pytest.approx(base + m.fields.alpha(1, 4, 5), rel=1e-12)


def test_cubic_energy_is_odd_part_of_strain_energy(small_beam):
    m = small_beam
    labels = [0, 4, 5]
    tensor = full_tensor(m.fields, labels)
    scale = 1e-8 / np.abs(m.basis.vectors[:, labels]).max()
    for q in ({0: 1.0, 1: 0.5, 2: -0.3}, {0: -0.2, 1: 1.0, 2: 0.7}, {0: 0.4, 1: -0.9, 2: 1.0}):
        q = dict(zip(labels, (scale * v for v in q.values())))
        u = sum(q[k] * m.basis.vector(k) for k in labels)
        odd = 0.5 * (strain_energy(m.mesh, m.material, u, m.system) - strain_energy(m.mesh, m.material, -u, m.system))
        assert tensor.cubic_energy(q) == pytest.approx(odd, rel=1e-6)


def test_strain_energy_polynomial_fit_recovers_cubic_coefficients(small_beam):
    m = small_beam
    labels = [0, 4, 5]
    tensor = full_tensor(m.fields, labels)
    scale = 2e-8 / np.abs(m.basis.vectors[:, labels]).max()
    grid = np.array(list(itertools.product(np.linspace(-1, 1, 5), repeat=3)))
    monomials = [e for e in itertools.product(range(5), repeat=3) if sum(e) <= 4]
    A = np.array([[np.prod(t**np.array(e)) for e in monomials] for t in grid])
    U = np.array(
        [strain_energy(m.mesh, m.material, scale * (m.basis.vectors[:, labels] @ t), m.system) for t in grid]
    )
    coef, *_ = np.linalg.lstsq(A, U, rcond=None)
    fit = dict(zip(monomials, coef / scale**3))
    cubic = [x for x in monomials if sum(x) == 3]
    floor = 1e-6 * max(abs(fit[e]) for e in cubic)
    for e in cubic:
        expected = sum(
            tensor[tuple(labels[i] for i in idx)]
            for idx in itertools.product(range(3), repeat=3)
            if tuple(np.bincount(idx, minlength=3)) == e
        )
        assert fit[e] == pytest.approx(expected, rel=1e-6, abs=floor)


def test_tilde_expands_to_two_alpha_ddl_plus_alpha_ldd(small_beam):
    tensor = full_tensor(small_beam.fields, [0, 4])
    assert alpha_tilde(tensor, 0, 0, 4) == pytest.approx(2 * tensor[(0, 0, 4)] + tensor[(4, 0, 0)], rel=1e-14)
    assert tilde_terms(0, 0, 4) == {(0, 0, 4): 1.0, (4, 0, 0): 1.0, (0, 4, 0): 1.0}


def test_bar_is_sum_of_two_tildes(small_beam):
    tensor = full_tensor(small_beam.fields, [0, 1, 2])
    assert alpha_bar(tensor, 0, 1, 2) == pytest.approx(alpha_tilde(tensor, 0, 1, 2) + alpha_tilde(tensor, 0, 2, 1), rel=1e-14)
    assert sum(bar_terms(0, 1, 2).values()) == 6


def test_zero_constituents_give_zero():
    t = CouplingTensor({k: 0.0 for k in itertools.product("ab", repeat=3)})
    assert alpha_tilde(t, "a", "a", "b") == 0.0
    assert alpha_bar(t, "a", "a", "b") == 0.0


def test_missing_entry_names_triple(small_beam):
    tensor = compute_tensor(small_beam.fields, [(0, 1, 2)])
    with pytest.raises(MissingEntryError, match=r"\(2, 0, 1\)"):
        alpha_tilde(tensor, 0, 1, 2)


def test_stale_basis_rejected(small_beam, res_modal):
    m = small_beam
    with pytest.raises(StaleBasisError):
        ModalFields(m.mesh, m.material, m.system, m.basis, key=mesh_key(res_modal.mesh))
    ModalFields(m.mesh, m.material, m.system, m.basis, key=mesh_key(m.mesh))
    tensor = compute_tensor(res_modal.fields, [(0, 0, 1)])
    with pytest.raises(StaleBasisError):
        tensor.require(m.basis)
    with pytest.raises(StaleBasisError):
        aggregate_partials(m.fields, "tilde", (0, 0, 1), tensor)
