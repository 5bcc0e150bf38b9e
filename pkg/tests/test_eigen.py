import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from couplopt import eigen
from couplopt.benchmarks import clamped_beam
from couplopt.eigen import (
    CholeskyFactor,
    EigenError,
    ModalBasis,
    ModeLostError,
    TrackingConfig,
    apply_tracking,
    mac_matrix,
    solve_modes,
    track_modes,
)
from couplopt.fem import Material, SystemMatrices, assemble_system
from couplopt.mesh import CrossSection2D, extrude

UM = 1e-6


def matrices(K, M):
    n = K.shape[0]
    return SystemMatrices(sp.csr_matrix(K), sp.csr_matrix(M), np.arange(n), np.arange(n), n)


def test_two_dof_closed_form():
    k, m = 3.0, 2.0
    K = np.array([[2 * k, -k], [-k, k]])
    M = np.diag([m, m])
    basis = solve_modes(matrices(K, M), 2)
    expected = k / m * np.array([(3 - np.sqrt(5)) / 2, (3 + np.sqrt(5)) / 2])
    assert np.allclose(basis.omega2, expected, rtol=1e-14)
    assert np.allclose(basis.vectors.T @ M @ basis.vectors, np.eye(2), atol=1e-14)
    # largest entry of each mode is positive
    V = basis.vectors
    assert np.all(V[np.argmax(np.abs(V), axis=0), [0, 1]] > 0)


@pytest.fixture(scope="module")
def small_system():
    sec = CrossSection2D.from_rectangles([(0.0, 0.0, 2 * UM, 2 * UM), (2 * UM, 0.0, 12 * UM, 2 * UM)], ["anchor", "spring"])
    m = extrude(sec, 2 * UM, 1, 1 * UM)
    system = assemble_system(m, Material())
    assert system.n <= 300
    return system


def test_sparse_path_matches_dense_oracle(small_system, monkeypatch):
    K, M = small_system.K.toarray(), small_system.M.toarray()
    w2_ref, V_ref = sla.eigh(K, M, subset_by_index=[0, 5])
    monkeypatch.setattr(eigen, "DENSE_LIMIT", 0)
    basis = solve_modes(small_system, 6)
    assert np.allclose(basis.omega2, w2_ref, rtol=1e-8, atol=0)
    for i in range(6):
        v, r = basis.vectors[:, i], V_ref[:, i]
        assert min(np.abs(v - r).max(), np.abs(v + r).max()) < 1e-8 * np.abs(r).max()


def test_modes_are_mass_orthonormal_and_whitened(small_system):
    basis = solve_modes(small_system, 6)
    V = basis.vectors
    assert np.allclose(V.T @ small_system.M @ V, np.eye(6), atol=1e-12)
    assert np.allclose(V.T @ small_system.K @ V, np.diag(basis.omega2), rtol=0, atol=1e-9 * basis.omega2.max())
    assert np.allclose(basis.whitened.T @ basis.whitened, np.eye(6), atol=1e-12)


def test_cholesky_factor_reproduces_mass_norm(small_system, rng):
    R = CholeskyFactor(small_system.M)
    X = rng.standard_normal((small_system.n, 3))
    RX = R.apply(X)
    assert np.allclose(RX.T @ RX, X.T @ small_system.M @ X, rtol=1e-12, atol=0)
    assert np.allclose(R.apply(X[:, 0]), RX[:, 0])


def test_too_many_modes_rejected():
    with pytest.raises(EigenError):
        solve_modes(matrices(np.eye(2), np.eye(2)), 3)


def test_clamped_beam_against_euler_bernoulli():
    mat = Material()
    L, b = 100 * UM, 2 * UM
    basis = solve_modes(assemble_system(clamped_beam(), mat), 1)
    EI = mat.youngs_modulus * b**4 / 12
    f_eb = 4.730041**2 / (2 * np.pi * L**2) * np.sqrt(EI / (mat.density * b * b))
    assert abs(basis.frequency(0) / f_eb - 1) < 0.03


def basis_from(V, omega2, labels=None):
    return ModalBasis(np.asarray(omega2, float), V, labels or {i: i for i in range(V.shape[1])}, V.copy())


def test_mac_identity_permutation_and_sign_flip():
    V = np.eye(5)[:, :3]
    ref = basis_from(V, [1.0, 2.0, 3.0])
    assert np.allclose(mac_matrix(ref, ref, ref, [0, 1, 2], TrackingConfig()), np.eye(3))
    assert track_modes(ref, ref, ref) == {0: 0, 1: 1, 2: 2}
    perm = basis_from(V[:, [1, 0, 2]] * np.array([1, -1, 1]), [1.0, 2.0, 3.0])
    assignment = track_modes(perm, ref, ref)
    assert assignment == {0: 1, 1: 0, 2: 2}
    tracked = apply_tracking(perm, ref, ref, assignment)
    for label in (0, 1, 2):
        assert np.allclose(tracked.vector(label), ref.vector(label))


def test_mac_weights_previous_and_initial():
    V = np.eye(3)
    a = 1 / np.sqrt(2)
    prev = basis_from(np.array([[a, 0], [a, 0], [0, 1]]), [1.0, 2.0])
    init = basis_from(V[:, :2], [1.0, 2.0])
    cur = basis_from(V[:, :2], [1.0, 2.0])
    mac = mac_matrix(cur, prev, init, [0], TrackingConfig(0.1, 0.9, 0.3))
    assert np.allclose(mac[:, 0], [0.1 * a + 0.9, 0.1 * a])


def test_mode_lost_below_threshold():
    V = np.eye(4)
    ref = basis_from(V[:, :2], [1.0, 2.0])
    cur = basis_from(V[:, 2:], [1.0, 2.0])
    with pytest.raises(ModeLostError) as info:
        track_modes(cur, ref, ref)
    assert info.value.label in (0, 1)


def test_labels_resolve_to_indices():
    basis = basis_from(np.eye(3), [1.0, 4.0, 9.0], {"drive": 2, "sense": 0})
    assert basis.index("drive") == 2
    assert basis.frequency("sense") == pytest.approx(1 / (2 * np.pi))
    with pytest.raises(KeyError, match="nope"):
        basis.index("nope")
