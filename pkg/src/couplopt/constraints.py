"""Constraint and objective functions with their design gradients.

Every constraint is normalized so that ``g <= 0`` means feasible and ``g`` is
O(1) at the initial design.  Width and gap constraints expand to one row per
probe site.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingTensor, ModalFields, aggregate_terms
from .eigen import ModalBasis
from .fem import SystemMatrices
from .mesh import ExtrudedMesh
from .sensitivity import (
    NelsonSolver,
    Partials,
    abs_partials,
    adjoint_total_sensitivity,
    aggregate_partials,
    eigvec_ratio_partials,
    frequency_gradient,
)
from .shape_param import MorphOperator

log = logging.getLogger(__name__)

KINDS = (
    "couplingAbsLE",
    "couplingAbsGE",
    "freqBand",
    "freqGapGE",
    "resonanceDetuneLE",
    "eigvecRatioLE",
    "minWidth",
    "minGap",
    "objectiveSquaredNorm",
)


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSpec:
    """One entry of the constraint language.

    Field use per kind:

    * ``couplingAbsLE`` / ``couplingAbsGE``: ``aggregate`` in tilde/bar/alpha,
      ``labels`` the index triple, ``factor`` the ratio to the initial
      magnitude.
    * ``freqBand``: ``labels[0]``, ``bound`` the relative half-width (0.01).
    * ``freqGapGE``: ``labels`` (a, b), ``bound`` the minimal gap in Hz.
    * ``resonanceDetuneLE``: ``|factor f_a - f_b| <= bound``; with
      ``relative`` the bound is a fraction of ``f_b``.
    * ``eigvecRatioLE``: ``labels[0]``, ``bound`` the maximal ratio (a
      multiple of the initial ratio with ``relative``), ``region`` the
      electrode tag.
    * ``minWidth`` / ``minGap``: ``bound`` in meters.
    * ``objectiveSquaredNorm``: ``bound`` is the normalization length.
    """

    kind: str
    id: str = ""
    labels: tuple = ()
    aggregate: str = "bar"
    factor: float = 1.0
    bound: float = 0.0
    relative: bool = False
    region: str = "electrode"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConstraintError(f"unknown constraint kind {self.kind!r}")
        if not np.isfinite(self.bound) or not np.isfinite(self.factor):
            raise ConstraintError(f"constraint {self.id or self.kind}: bounds must be finite")
        if not self.id:
            object.__setattr__(self, "id", self.kind + "".join(f"_{l}" for l in self.labels))

    @property
    def is_objective(self) -> bool:
        return self.kind == "objectiveSquaredNorm"

    def triples(self) -> list:
        if self.kind in ("couplingAbsLE", "couplingAbsGE"):
            return list(aggregate_terms(self.aggregate, self.labels))
        return []

    def mode_labels(self) -> set:
        if self.kind in ("minWidth", "minGap", "objectiveSquaredNorm"):
            return set()
        return set(self.labels)


# ----------------------------------------------------------------------------
# width / gap probes by ray casting


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


@dataclass
class ProbeSet:
    """Ray probes anchored at boundary nodes with frozen directions.

    ``kind`` is ``"width"`` (inward rays) or ``"gap"`` (outward rays).
    """

    kind: str
    sites: np.ndarray  # 2D node index per probe
    directions: np.ndarray  # (n, 2) unit ray directions
    edges: np.ndarray  # (E, 2) boundary edges as 2D node pairs
    horizon: float = np.inf

    def __len__(self) -> int:
        return len(self.sites)


@dataclass
class ProbeHit:
    length: float
    edge: int  # -1 when the ray hit nothing within the horizon
    grad2d: dict  # 2D node -> d(length)/d(xy)


def _boundary_edges(mesh: ExtrudedMesh) -> np.ndarray:
    out = []
    for loop in mesh.loops:
        loop = np.asarray(loop)
        out.append(np.column_stack([loop, np.roll(loop, -1)]))
    return np.concatenate(out)


def build_probes(mesh: ExtrudedMesh, morph: MorphOperator, kind: str, horizon: float = np.inf) -> ProbeSet:
    """Probes at every parameter node along its frozen normal."""
    sites = np.asarray(morph.parameter_nodes, dtype=int)
    n = np.array([morph.normals[int(i)] for i in sites]).reshape(-1, 2)
    if kind == "width":
        d = -n
    elif kind == "gap":
        d = n
    else:
        raise ConstraintError(f"unknown probe kind {kind!r}")
    probes = ProbeSet(kind, sites, d, _boundary_edges(mesh), horizon)
    keep = []
    pts = mesh.points2d
    for k in range(len(sites)):
        hit = cast_ray(pts, probes, k)
        if hit.edge < 0 and kind == "width":
            log.warning("width probe at node %d escapes the domain; skipped", sites[k])
        elif hit.edge >= 0:
            keep.append(k)
    keep = np.asarray(keep, dtype=int)
    return ProbeSet(kind, sites[keep], d[keep], probes.edges, horizon)


def cast_ray(points2d: np.ndarray, probes: ProbeSet, k: int) -> ProbeHit:
    """First boundary crossing of probe ``k`` and the gradient of its length."""
    i = int(probes.sites[k])
    x0, d = points2d[i], probes.directions[k]
    E = probes.edges
    A, B = points2d[E[:, 0]], points2d[E[:, 1]]
    e = B - A
    u = A - x0
    den = _cross(d, e)
    scale = np.linalg.norm(e, axis=1)
    ok = (np.abs(den) > 1e-12 * scale) & (E[:, 0] != i) & (E[:, 1] != i)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ok, _cross(u, e) / den, np.inf)
        s = np.where(ok, _cross(u, d) / den, -1.0)
    tol = 1e-12 * max(float(np.max(scale)), 1e-300)
    valid = ok & (t > tol) & (s >= -1e-12) & (s <= 1 + 1e-12) & (t <= probes.horizon)
    if not np.any(valid):
        return ProbeHit(float(probes.horizon), -1, {})
    cand = np.nonzero(valid)[0]
    j = int(cand[np.argmin(t[cand])])
    tj, ej, uj, dj = t[j], e[j], u[j], den[j]
    dt_du = np.array([ej[1], -ej[0]]) / dj
    dt_de = (np.array([-uj[1], uj[0]]) - tj * np.array([-d[1], d[0]])) / dj
    grad = {i: -dt_du}
    a, b = int(E[j, 0]), int(E[j, 1])
    grad[a] = grad.get(a, 0.0) + dt_du - dt_de
    grad[b] = grad.get(b, 0.0) + dt_de
    return ProbeHit(float(tj), j, grad)


def measure_widths_and_gaps(mesh: ExtrudedMesh, probes: ProbeSet) -> np.ndarray:
    """Probe lengths (meters); the horizon for gap rays that hit nothing."""
    pts = mesh.points2d
    return np.array([cast_ray(pts, probes, k).length for k in range(len(probes))])


def _probe_param_gradient(morph: MorphOperator, grad2d: dict) -> np.ndarray:
    g = np.zeros(2 * morph.n2d)
    for node, v in grad2d.items():
        g[2 * node : 2 * node + 2] += v
    return morph.G.T @ g


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class Analysis:
    """Everything the constraints need about one design."""

    p: np.ndarray
    mesh: ExtrudedMesh
    morph: MorphOperator
    system: SystemMatrices
    basis: ModalBasis
    fields: ModalFields
    tensor: CouplingTensor
    _solver: NelsonSolver | None = field(default=None, repr=False)

    @property
    def solver(self) -> NelsonSolver:
        if self._solver is None:
            self._solver = NelsonSolver(self.system.K, self.system.M, self.basis)
        return self._solver


@dataclass
class Baselines:
    """Initial-design reference values, captured once."""

    frequencies: dict = field(default_factory=dict)  # label -> f0
    couplings: dict = field(default_factory=dict)  # spec id -> |value|0
    ratios: dict = field(default_factory=dict)  # spec id -> eigenvector ratio0


@dataclass
class ConstraintRow:
    id: str
    value: float  # normalized g, feasible when <= 0
    quantity: float  # underlying physical quantity
    bound: float
    gradient: np.ndarray | None = None

    def feasible(self, tol: float = 0.0) -> bool:
        return self.value <= tol


def coupling_value(analysis: Analysis, spec: ConstraintSpec) -> float:
    return analysis.tensor.evaluate(spec.aggregate, spec.labels)


def capture_baselines(analysis: Analysis, specs) -> Baselines:
    base = Baselines()
    for label in analysis.basis.labels:
        base.frequencies[label] = analysis.basis.frequency(label)
    for s in specs:
        if s.kind in ("couplingAbsLE", "couplingAbsGE"):
            v = abs(coupling_value(analysis, s))
            if v == 0.0:
                raise ConstraintError(f"{s.id}: initial coupling is exactly zero; cannot normalize")
            scale = max((abs(a) for a in analysis.tensor.entries.values()), default=0.0)
            if v < 1e-10 * scale:
                log.warning("%s: initial coupling %.3e is at roundoff level (largest entry %.3e); likely zero by symmetry", s.id, v, scale)
            base.couplings[s.id] = v
        elif s.kind == "eigvecRatioLE":
            base.ratios[s.id] = _ratio_partials(analysis, s).value
    return base


def electrode_masks(mesh: ExtrudedMesh, system: SystemMatrices, region: str):
    """Boolean free-DOF masks of x and y DOFs of nodes in ``region``."""
    nodes = np.unique(mesh.elements[mesh.region_elements(region)])
    if len(nodes) == 0:
        raise ConstraintError(f"mesh has no region {region!r}")
    mx = np.zeros(system.n, dtype=bool)
    my = np.zeros(system.n, dtype=bool)
    fx, fy = system.dof_map[3 * nodes], system.dof_map[3 * nodes + 1]
    mx[fx[fx >= 0]] = True
    my[fy[fy >= 0]] = True
    return mx, my


def _ratio_partials(analysis: Analysis, spec: ConstraintSpec) -> Partials:
    mx, my = electrode_masks(analysis.mesh, analysis.system, spec.region)
    return eigvec_ratio_partials(analysis.basis, spec.labels[0], mx, my)


def _adjoint(analysis: Analysis, partials: Partials) -> np.ndarray:
    return adjoint_total_sensitivity(analysis.fields, partials, analysis.solver, analysis.morph)


def _freq_grad(analysis: Analysis, label) -> np.ndarray:
    return frequency_gradient(analysis.fields, label, analysis.morph)


def evaluate_spec(analysis: Analysis, spec: ConstraintSpec, baselines: Baselines, probes: dict | None = None, gradients: bool = True) -> list:
    """Rows for one spec (several for width/gap kinds)."""
    k = spec.kind
    b = analysis.basis
    grad = None
    if k in ("couplingAbsLE", "couplingAbsGE"):
        ref = spec.factor * baselines.couplings[spec.id]
        mag = abs(coupling_value(analysis, spec))
        if gradients:
            part = abs_partials(aggregate_partials(analysis.fields, spec.aggregate, spec.labels, analysis.tensor))
            grad = _adjoint(analysis, part) / ref
        if k == "couplingAbsLE":
            return [ConstraintRow(spec.id, mag / ref - 1.0, mag, ref, grad)]
        return [ConstraintRow(spec.id, 1.0 - mag / ref, mag, ref, None if grad is None else -grad)]

    if k == "freqBand":
        label = spec.labels[0]
        f0 = baselines.frequencies[label]
        tol = spec.bound or 0.01
        r = b.frequency(label) / f0
        up, down = r - (1 + tol), (1 - tol) - r
        sign = 1.0 if up >= down else -1.0
        if gradients:
            grad = sign * 100.0 * _freq_grad(analysis, label) / f0
        return [ConstraintRow(spec.id, 100.0 * max(up, down), b.frequency(label), tol, grad)]

    if k == "freqGapGE":
        la, lb = spec.labels
        diff = b.frequency(la) - b.frequency(lb)
        if gradients:
            s = float(np.sign(diff))
            grad = -s * (_freq_grad(analysis, la) - _freq_grad(analysis, lb)) / spec.bound
        return [ConstraintRow(spec.id, 1.0 - abs(diff) / spec.bound, abs(diff), spec.bound, grad)]

    if k == "resonanceDetuneLE":
        la, lb = spec.labels
        fa, fb = b.frequency(la), b.frequency(lb)
        det = spec.factor * fa - fb
        tol = spec.bound * fb if spec.relative else spec.bound
        g = abs(det) / tol - 1.0
        if gradients:
            s = float(np.sign(det))
            ga, gb = _freq_grad(analysis, la), _freq_grad(analysis, lb)
            grad = s * (spec.factor * ga - gb) / tol
            if spec.relative:
                grad = grad - abs(det) / tol**2 * spec.bound * gb
        return [ConstraintRow(spec.id, g, abs(det), tol, grad)]

    if k == "eigvecRatioLE":
        part = _ratio_partials(analysis, spec)
        ref = spec.bound * baselines.ratios[spec.id] if spec.relative else spec.bound
        if gradients:
            grad = _adjoint(analysis, part) / ref
        return [ConstraintRow(spec.id, part.value / ref - 1.0, part.value, ref, grad)]

    if k in ("minWidth", "minGap"):
        ps = probes["width" if k == "minWidth" else "gap"]
        pts = analysis.mesh.points2d
        rows = []
        for j in range(len(ps)):
            hit = cast_ray(pts, ps, j)
            if gradients:
                grad = -_probe_param_gradient(analysis.morph, hit.grad2d) / spec.bound
            rows.append(ConstraintRow(f"{spec.id}[{int(ps.sites[j])}]", 1.0 - hit.length / spec.bound, hit.length, spec.bound, grad))
        return rows

    if k == "objectiveSquaredNorm":
        p = analysis.p
        scale = len(p) * (spec.bound or 1.0) ** 2
        if gradients:
            grad = 2.0 * p / scale
        return [ConstraintRow(spec.id, float(p @ p) / scale, float(p @ p), scale, grad)]

    raise ConstraintError(f"unhandled kind {k!r}")


def evaluate_all(analysis: Analysis, specs, baselines: Baselines, probes: dict | None = None) -> list:
    """Values of every constraint row (no gradients)."""
    rows = []
    for s in specs:
        rows.extend(evaluate_spec(analysis, s, baselines, probes, gradients=False))
    return rows


def constraint_gradients(analysis: Analysis, specs, baselines: Baselines, probes: dict | None = None) -> list:
    """Rows with dense gradients dg/dp."""
    rows = []
    for s in specs:
        rows.extend(evaluate_spec(analysis, s, baselines, probes, gradients=True))
    return rows


def write_constraint_report(path, records) -> None:
    """CSV (iter, constraint-id, value, feasible, bound) from (iter, row) pairs."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "constraint_id", "value", "feasible", "bound"])
        for it, row in records:
            w.writerow([it, row.id, repr(float(row.value)), int(row.value <= 0.0), repr(float(row.bound))])
