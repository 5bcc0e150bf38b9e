"""Generalized eigenproblem, mass normalization and MAC mode tracking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .fem import SystemMatrices

log = logging.getLogger(__name__)

DENSE_LIMIT = 500
DEGENERACY_TOL = 1e-6


class EigenError(RuntimeError):
    pass


class ModeLostError(EigenError):
    def __init__(self, label, best):
        self.label, self.best = label, best
        super().__init__(f"mode {label!r} lost: best |MAC| = {best:.3f}")


class CholeskyFactor:
    """M = R^T R with R upper triangular in reverse Cuthill-McKee ordering.

    Only products ``R @ x`` are needed, so the factor is kept in banded form.
    """

    def __init__(self, M: sp.spmatrix):
        M = sp.csr_matrix(M)
        perm = reverse_cuthill_mckee(M, symmetric_mode=True)
        Mp = M[perm][:, perm].tocoo()
        n = M.shape[0]
        bw = int(np.max(np.abs(Mp.row - Mp.col))) if Mp.nnz else 0
        ab = np.zeros((bw + 1, n))
        upper = Mp.col >= Mp.row
        ab[bw + Mp.row[upper] - Mp.col[upper], Mp.col[upper]] = Mp.data[upper]
        self.perm, self.bw = perm, bw
        self.ab = sla.cholesky_banded(ab, lower=False)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """R @ x for vectors or column blocks."""
        xp = np.asarray(x)[self.perm]
        y = np.zeros_like(xp, dtype=float)
        n, bw = len(xp), self.bw
        for d in range(bw + 1):
            diag = self.ab[bw - d, d:]
            if xp.ndim == 1:
                y[: n - d] += diag * xp[d:]
            else:
                y[: n - d] += diag[:, None] * xp[d:]
        return y


@dataclass(frozen=True)
class ModalBasis:
    """Mass-normalized modes sorted by frequency.

    ``labels`` maps persistent mode names to column indices of ``vectors``.
    ``whitened`` holds R @ phi for mode tracking.
    """

    omega2: np.ndarray
    vectors: np.ndarray  # (n_free, k)
    labels: dict = field(default_factory=dict)
    whitened: np.ndarray | None = field(default=None, repr=False)

    @property
    def angular_frequencies(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.omega2, 0.0))

    @property
    def frequencies(self) -> np.ndarray:
        return self.angular_frequencies / (2 * np.pi)

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    def index(self, label) -> int:
        if isinstance(label, (int, np.integer)) and label not in self.labels:
            return int(label)
        try:
            return self.labels[label]
        except KeyError:
            raise KeyError(f"unknown mode label {label!r}") from None

    def vector(self, label) -> np.ndarray:
        return self.vectors[:, self.index(label)]

    def frequency(self, label) -> float:
        return float(self.frequencies[self.index(label)])

    def with_labels(self, labels: dict) -> "ModalBasis":
        return replace(self, labels=dict(labels))

    def degenerate_pairs(self, tol: float = DEGENERACY_TOL) -> list:
        w = self.angular_frequencies
        out = []
        for i in range(self.k - 1):
            if abs(w[i + 1] - w[i]) <= tol * max(w[i], 1e-300):
                out.append((i, i + 1))
        return out


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def solve_modes(system: SystemMatrices, count: int, residual_tol: float = 1e-8, whiten: bool = True) -> ModalBasis:
    """The ``count`` lowest mass-normalized modes of (K - w^2 M) phi = 0."""
    n = system.n
    if count > n:
        raise EigenError(f"requested {count} modes but system has {n} DOFs")
    K, M = system.K, system.M
    if n < DENSE_LIMIT:
        w2, V = sla.eigh(K.toarray(), M.toarray(), subset_by_index=[0, count - 1])
    else:
        v0 = np.cos(np.arange(n) * 0.7) + 1.5
        try:
            w2, V = spla.eigsh(K.tocsc(), k=count, M=M.tocsc(), sigma=0.0, which="LM", v0=v0, tol=0.0)
        except spla.ArpackNoConvergence as exc:
            raise EigenError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(w2)
    w2, V = w2[order], V[:, order]
    V = V / np.sqrt(np.einsum("ik,ik->k", V, M @ V))
    V = _fix_signs(V)
    KV = K @ V
    res = np.linalg.norm(KV - (M @ V) * w2, axis=0)
    scale = np.linalg.norm(KV, axis=0)
    bad = np.nonzero(res > residual_tol * scale)[0]
    if len(bad):
        raise EigenError(f"eigen residual too large for modes {bad.tolist()}: {(res / scale)[bad]}")
    W = CholeskyFactor(M).apply(V) if whiten else None
    return ModalBasis(w2, V, {i: i for i in range(count)}, W)


@dataclass(frozen=True)
class TrackingConfig:
    weight_a: float = 0.1
    weight_b: float = 0.9
    threshold: float = 0.3


def mac_matrix(current: ModalBasis, previous: ModalBasis, initial: ModalBasis, labels, cfg: TrackingConfig) -> np.ndarray:
    """MAC[i, j] between current mode i and tracked label j."""
    P = np.column_stack([previous.whitened[:, previous.index(l)] for l in labels])
    Q = np.column_stack([initial.whitened[:, initial.index(l)] for l in labels])
    return cfg.weight_a * current.whitened.T @ P + cfg.weight_b * current.whitened.T @ Q


def track_modes(
    current: ModalBasis,
    previous: ModalBasis,
    initial: ModalBasis,
    cfg: TrackingConfig = TrackingConfig(),
    labels=None,
) -> dict:
    """Assign each tracked label to a current mode by largest |MAC|.

    Collisions are resolved greedily in descending |MAC|; each current mode
    is used once.  Degenerate current modes are scored by the norm of the
    projection onto their subspace.
    """
    labels = list(previous.labels if labels is None else labels)
    mac = mac_matrix(current, previous, initial, labels, cfg)
    score = np.abs(mac)
    w = current.angular_frequencies
    i = 0
    while i < current.k:
        j = i
        while j + 1 < current.k and abs(w[j + 1] - w[i]) <= DEGENERACY_TOL * w[i]:
            j += 1
        if j > i:
            score[i : j + 1] = np.sqrt(np.sum(mac[i : j + 1] ** 2, axis=0))
        i = j + 1
    cand = [(-score[i, j], i, j) for i in range(current.k) for j in range(len(labels))]
    cand.sort()
    assigned, used = {}, set()
    for s, i, j in cand:
        if j in assigned or i in used:
            continue
        assigned[j] = i
        used.add(i)
        if len(assigned) == len(labels):
            break
    out = {}
    for j, label in enumerate(labels):
        i = assigned.get(j)
        if i is None or score[i, j] < cfg.threshold:
            raise ModeLostError(label, 0.0 if i is None else float(score[i, j]))
        out[label] = int(i)
    return out


def apply_tracking(current: ModalBasis, previous: ModalBasis, initial: ModalBasis, assignment: dict, cfg: TrackingConfig = TrackingConfig()) -> ModalBasis:
    """Label ``current`` and flip signs so tracked modes align with ``previous``."""
    V = current.vectors.copy()
    W = current.whitened.copy()
    labels = list(assignment)
    mac = mac_matrix(current, previous, initial, labels, cfg)
    for j, label in enumerate(labels):
        i = assignment[label]
        if mac[i, j] < 0:
            V[:, i] *= -1
            W[:, i] *= -1
    return replace(current, vectors=V, whitened=W, labels=dict(assignment))
