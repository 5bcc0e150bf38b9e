"""Problem setup and the outer shape-optimization loop.

Each iteration: modal analysis with headroom, MAC tracking, coupling tensor
for the referenced triples, constraint values and adjoint gradients, one MMA
step in box-normalized variables, then morphing of the mesh.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .benchmarks import BENCHMARKS
from .config import Config, ConfigError, parse_quantity
from .constraints import (
    KINDS,
    Analysis,
    Baselines,
    ConstraintError,
    ConstraintRow,
    ConstraintSpec,
    build_probes,
    capture_baselines,
    constraint_gradients,
    evaluate_all,
)
from .coupling import ModalFields, compute_tensor
from .eigen import ModalBasis, ModeLostError, TrackingConfig, apply_tracking, solve_modes, track_modes
from .fem import Material, assemble_system
from .mesh import ElementInversionError, ExtrudedMesh, MeshError, detect_symmetry, read_mesh
from .mma import MMAError, MmaSettings, MmaState, mma_update
from .shape_param import MorphOperator, apply_design, build_morph_operator, write_design

log = logging.getLogger(__name__)

HEADROOM = 5

EXIT_OK, EXIT_INFEASIBLE, EXIT_MODE_LOST, EXIT_MESH = 0, 2, 3, 4


@dataclass
class Problem:
    mesh: ExtrudedMesh
    material: Material
    morph: MorphOperator
    labels: dict  # mode name -> initial index
    specs: list
    lower: np.ndarray
    upper: np.ndarray
    mma: MmaSettings = field(default_factory=MmaSettings)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    max_iter: int = 150
    feas_tol: float = 1e-3
    step_tol: float = 1e-4  # on the box-normalized step, max-norm
    horizon_factor: float = 10.0

    @property
    def n_modes(self) -> int:
        return max(self.labels.values()) + 1 + HEADROOM

    @property
    def n_params(self) -> int:
        return self.morph.n_params

    def triples(self) -> list:
        out = []
        for s in self.specs:
            out.extend(s.triples())
        return out


# ----------------------------------------------------------------------------
# configuration -> problem


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_constraint(key: str, text: str, labels: dict) -> ConstraintSpec:
    """``kind [aggregate] label... [name=value...]`` -> ConstraintSpec."""
    tok = text.split()
    if not tok or tok[0] not in KINDS:
        raise ValueError(f"unknown constraint kind {tok[0] if tok else ''!r}; expected one of {', '.join(KINDS)}")
    kind, rest = tok[0], tok[1:]
    kw = {"kind": kind, "id": key}
    pos = []
    for t in rest:
        if "=" in t:
            name, val = t.split("=", 1)
            if name in ("factor", "bound"):
                kw[name] = parse_quantity(val)
            elif name == "relative":
                kw[name] = _bool(val)
            elif name == "region":
                kw[name] = val
            else:
                raise ValueError(f"unknown option {name!r}")
        else:
            pos.append(t)
    if kind in ("couplingAbsLE", "couplingAbsGE"):
        if not pos or pos[0] not in ("tilde", "bar", "alpha"):
            raise ValueError("coupling constraints need an aggregate kind (tilde, bar, alpha)")
        kw["aggregate"] = pos.pop(0)
        if len(pos) != 3:
            raise ValueError("coupling constraints need three mode labels")
    for p in pos:
        if p not in labels:
            raise ValueError(f"unknown mode label {p!r}")
    kw["labels"] = tuple(pos)
    need = {"freqBand": 1, "eigvecRatioLE": 1, "freqGapGE": 2, "resonanceDetuneLE": 2,
            "minWidth": 0, "minGap": 0, "objectiveSquaredNorm": 0}
    if kind in need and len(pos) != need[kind]:
        raise ValueError(f"{kind} takes {need[kind]} mode label(s)")
    if kind in ("freqGapGE", "resonanceDetuneLE", "eigvecRatioLE", "minWidth", "minGap") and kw.get("bound", 0.0) <= 0:
        raise ValueError(f"{kind} needs a positive bound=")
    return ConstraintSpec(**kw)


def parse_labels(cfg: Config) -> dict:
    labels = {}
    for key, e in cfg.items("modes"):
        try:
            labels[key] = int(e.value)
        except ValueError:
            raise ConfigError(f"[modes] {key}: expected a mode index", cfg.path, e.line) from None
        if labels[key] < 0:
            raise ConfigError(f"[modes] {key}: negative mode index", cfg.path, e.line)
    if not labels:
        raise ConfigError("no mode labels defined in [modes]", cfg.path)
    return labels


def parse_specs(cfg: Config, labels: dict) -> list:
    specs = []
    for key, e in cfg.items("constraints"):
        try:
            specs.append(parse_constraint(key, e.value, labels))
        except (ValueError, ConstraintError) as exc:
            raise ConfigError(f"[constraints] {key}: {exc}", cfg.path, e.line) from None
    if sum(s.is_objective for s in specs) > 1:
        raise ConfigError("at most one objective may be given", cfg.path)
    return specs


def build_mesh(cfg: Config, base_dir: Path | None = None) -> ExtrudedMesh:
    if cfg.has("geometry", "mesh"):
        path = Path(cfg.get("geometry", "mesh"))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return read_mesh(path)
    name = cfg.get("geometry", "benchmark")
    if name is None:
        raise ConfigError("[geometry] needs 'mesh' or 'benchmark'", cfg.path)
    if name not in BENCHMARKS:
        raise cfg.error("geometry", "benchmark", f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    kwargs = {}
    um_keys = {"thickness", "edge", "length", "width"}
    for key, e in cfg.items("geometry"):
        if key in ("benchmark", "mesh"):
            continue
        try:
            if key in um_keys:
                kwargs[key] = parse_quantity(e.value) / 1e-6
            elif key == "layers":
                kwargs[key] = int(e.value)
            elif key == "fix":
                kwargs[key] = e.value
            else:
                vals = tuple(parse_quantity(v) / 1e-6 for v in e.value.split(","))
                kwargs[key] = vals if len(vals) > 1 else vals[0]
        except ValueError as exc:
            raise ConfigError(f"[geometry] {key}: {exc}", cfg.path, e.line) from None
    try:
        return BENCHMARKS[name](**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[geometry]: {exc}", cfg.path) from None


def build_material(cfg: Config) -> Material:
    m = Material()
    return Material(
        cfg.quantity("material", "youngs_modulus", m.youngs_modulus),
        cfg.quantity("material", "poisson_ratio", m.poisson_ratio),
        cfg.quantity("material", "density", m.density),
    )


def build_problem(cfg: Config, base_dir: Path | None = None, max_iter: int | None = None) -> Problem:
    labels = parse_labels(cfg)
    specs = parse_specs(cfg, labels)
    try:
        mesh = build_mesh(cfg, base_dir)
    except MeshError as exc:
        raise ConfigError(f"geometry: {exc}", cfg.path) from None
    material = build_material(cfg)
    sym_axes = (cfg.get("design", "symmetry", "xy") or "none").lower()
    symmetry = None
    if sym_axes != "none":
        symmetry = detect_symmetry(mesh, tuple(sym_axes))
    regions = tuple(cfg.get("design", "movable", "spring").replace(",", " ").split())
    radius = cfg.integer("design", "decay_radius", 3)
    morph = build_morph_operator(mesh, symmetry, regions, radius)
    if morph.n_params == 0:
        raise ConfigError("no movable boundary nodes; check [design] movable", cfg.path)
    lo = cfg.quantity("design", "lower", -0.5e-6)
    hi = cfg.quantity("design", "upper", 0.5e-6)
    if not lo < 0 < hi:
        raise ConfigError("[design] requires lower < 0 < upper", cfg.path)
    s = MmaSettings()
    mma = MmaSettings(
        asyinit=cfg.quantity("optimizer", "asyinit", s.asyinit),
        asydecr=cfg.quantity("optimizer", "asydecr", s.asydecr),
        asyincr=cfg.quantity("optimizer", "asyincr", s.asyincr),
        move=cfg.quantity("optimizer", "move", s.move),
        kkt_tol=cfg.quantity("optimizer", "kkt_tol", s.kkt_tol),
    )
    t = TrackingConfig()
    tracking = TrackingConfig(
        cfg.quantity("tracking", "weight_a", t.weight_a),
        cfg.quantity("tracking", "weight_b", t.weight_b),
        cfg.quantity("tracking", "threshold", t.threshold),
    )
    return Problem(
        mesh, material, morph, labels, specs,
        np.full(morph.n_params, lo), np.full(morph.n_params, hi),
        mma, tracking,
        max_iter if max_iter is not None else cfg.integer("optimizer", "max_iter", 150),
        cfg.quantity("optimizer", "feas_tol", 1e-3),
        cfg.quantity("optimizer", "step_tol", 1e-4),
    )


# ----------------------------------------------------------------------------
# analysis of one design


def analyze(problem: Problem, p: np.ndarray, previous: ModalBasis | None = None, initial: ModalBasis | None = None, check: bool = True) -> Analysis:
    """Full pipeline for design ``p``; tracks labels against earlier bases."""
    mesh = apply_design(problem.mesh, problem.morph, p, check=check)
    system = assemble_system(mesh, problem.material)
    for name, idx in problem.labels.items():
        if idx >= system.n:
            raise ConstraintError(f"mode label {name!r} refers to index {idx} but the model has {system.n} free DOFs")
    basis = solve_modes(system, min(problem.n_modes, system.n))
    if previous is None:
        for name, idx in problem.labels.items():
            if idx >= basis.k:
                raise ConstraintError(f"mode label {name!r} refers to index {idx} beyond {basis.k} computed modes")
        basis = basis.with_labels(problem.labels)
    else:
        assignment = track_modes(basis, previous, initial or previous, problem.tracking, list(problem.labels))
        basis = apply_tracking(basis, previous, initial or previous, assignment, problem.tracking)
    fields = ModalFields(mesh, problem.material, system, basis)
    tensor = compute_tensor(fields, problem.triples())
    return Analysis(np.asarray(p, float).copy(), mesh, problem.morph, system, basis, fields, tensor)


def make_probes(problem: Problem) -> dict:
    kinds = {s.kind for s in problem.specs}
    probes = {}
    wmin = min((s.bound for s in problem.specs if s.kind == "minWidth"), default=None)
    if "minWidth" in kinds:
        probes["width"] = build_probes(problem.mesh, problem.morph, "width")
    if "minGap" in kinds:
        ref = wmin if wmin is not None else min(s.bound for s in problem.specs if s.kind == "minGap")
        probes["gap"] = build_probes(problem.mesh, problem.morph, "gap", problem.horizon_factor * ref)
    return probes


# ----------------------------------------------------------------------------
# the loop


@dataclass
class IterationRecord:
    iter: int
    objective: float
    constraints: dict  # row id -> g
    frequencies: dict  # label -> Hz
    couplings: dict  # spec id -> |value|
    max_violation: float
    step_norm: float


@dataclass
class OptimizationResult:
    p: np.ndarray
    mesh: ExtrudedMesh | None
    history: list
    status: int
    message: str
    analysis: Analysis | None = None
    baselines: Baselines | None = None
    initial: Analysis | None = None


def split_rows(rows: list, specs: list):
    """(objective row or None, constraint rows)."""
    obj_ids = {s.id for s in specs if s.is_objective}
    obj = [r for r in rows if r.id in obj_ids]
    return (obj[0] if obj else None), [r for r in rows if r.id not in obj_ids]


def make_record(it: int, analysis: Analysis, rows: list, specs: list, step: float) -> IterationRecord:
    obj, cons = split_rows(rows, specs)
    couplings = {s.id: abs(analysis.tensor.evaluate(s.aggregate, s.labels)) for s in specs if s.triples()}
    return IterationRecord(
        it,
        obj.value if obj else 0.0,
        {r.id: r.value for r in cons},
        {l: analysis.basis.frequency(l) for l in analysis.basis.labels},
        couplings,
        max((r.value for r in cons), default=-np.inf),
        step,
    )


def write_history(path, history: list) -> None:
    if not history:
        return
    h0 = history[0]
    cons, freqs, coups = list(h0.constraints), list(h0.frequencies), list(h0.couplings)
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "objective"] + cons + [f"f_{l}" for l in freqs] + [f"abs_{c}" for c in coups] + ["max_violation", "step_norm"])
        for r in history:
            w.writerow(
                [r.iter, repr(r.objective)]
                + [repr(r.constraints[c]) for c in cons]
                + [repr(r.frequencies[l]) for l in freqs]
                + [repr(r.couplings[c]) for c in coups]
                + [repr(r.max_violation), repr(r.step_norm)]
            )


def _save_state(path: Path, it: int, x: np.ndarray, step: float, state: MmaState, basis: ModalBasis) -> None:
    d = {k: v for k, v in state.to_dict().items() if v is not None}
    np.savez(
        path, iter=it, x=x, step=step, omega2=basis.omega2, vectors=basis.vectors, whitened=basis.whitened,
        label_names=np.array(list(basis.labels)), label_idx=np.array(list(basis.labels.values())),
        **{f"mma_{k}": v for k, v in d.items()},
    )


def _load_state(path: Path, state: MmaState):
    z = np.load(path, allow_pickle=False)
    state.load_dict({k[4:]: z[k] for k in z.files if k.startswith("mma_")})
    labels = {str(n): int(i) for n, i in zip(z["label_names"], z["label_idx"])}
    basis = ModalBasis(z["omega2"], z["vectors"], labels, z["whitened"])
    return int(z["iter"]), z["x"], float(z["step"]), basis


def run_optimization(problem: Problem, out_dir=None, resume=None, progress=None) -> OptimizationResult:
    """Optimize ``problem``; writes history and checkpoints when ``out_dir`` is set."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    span = problem.upper - problem.lower
    to_p = lambda x: problem.lower + x * span  # noqa: E731
    p0 = np.zeros(problem.n_params)
    try:
        initial = analyze(problem, p0)
    except ElementInversionError as exc:
        return OptimizationResult(p0, None, [], EXIT_MESH, f"initial mesh invalid: {exc}")
    baselines = capture_baselines(initial, problem.specs)
    probes = make_probes(problem)
    state = MmaState.create(np.zeros(problem.n_params), np.ones(problem.n_params), problem.mma)
    x = (p0 - problem.lower) / span
    history: list = []
    analysis, previous, start, step = initial, initial.basis, 0, 0.0
    if resume is not None:
        start, x, step, previous = _load_state(Path(resume), state)
        history = _read_history_prefix(out, start) if out is not None else []
        try:
            analysis = analyze(problem, to_p(x), previous, initial.basis)
        except ModeLostError as exc:
            return OptimizationResult(to_p(x), None, history, EXIT_MODE_LOST, str(exc))
    status, message = EXIT_INFEASIBLE, "maximum iterations reached"
    it = start
    while True:
        rows = constraint_gradients(analysis, problem.specs, baselines, probes)
        rec = make_record(it, analysis, rows, problem.specs, step)
        history.append(rec)
        if progress is not None:
            progress(rec)
        if out is not None:
            write_design(out / "checkpoints" / f"design_{it:04d}.txt", analysis.p)
            write_history(out / "history.csv", history)
        feasible = rec.max_violation <= problem.feas_tol
        if feasible and it > start and step < problem.step_tol:
            status, message = EXIT_OK, "converged"
            break
        if it >= problem.max_iter:
            status = EXIT_OK if feasible else EXIT_INFEASIBLE
            message = "maximum iterations reached" + ("" if feasible else f"; max violation {rec.max_violation:.3e}")
            break
        obj, cons = split_rows(rows, problem.specs)
        f0 = obj.value if obj else 0.0
        df0 = obj.gradient * span if obj else np.zeros_like(x)
        fval = np.array([r.value for r in cons]) if cons else np.array([-1.0])
        dfdx = np.array([r.gradient * span for r in cons]) if cons else np.zeros((1, len(x)))
        try:
            x_new = mma_update(state, x, f0, df0, fval, dfdx)
        except MMAError as exc:
            status = EXIT_OK if feasible else EXIT_INFEASIBLE
            message = f"MMA failure: {exc}"
            break
        nxt = None
        for attempt in range(4):
            try:
                nxt = analyze(problem, to_p(x_new), analysis.basis, initial.basis)
                break
            except ElementInversionError as exc:
                if attempt == 3:
                    return OptimizationResult(to_p(x), analysis.mesh, history, EXIT_MESH, f"element inversion: {exc}", analysis, baselines, initial)
                log.warning("element inversion at iteration %d; halving step", it + 1)
                x_new = x + 0.5 * (x_new - x)
            except ModeLostError as exc:
                return OptimizationResult(to_p(x), analysis.mesh, history, EXIT_MODE_LOST, str(exc), analysis, baselines, initial)
        step = float(np.max(np.abs(x_new - x)))
        x = x_new
        analysis = nxt
        it += 1
        if out is not None:
            for name in ("state.npz", f"state_{it:04d}.npz"):
                _save_state(out / "checkpoints" / name, it, x, step, state, analysis.basis)
    return OptimizationResult(analysis.p, analysis.mesh, history, status, message, analysis, baselines, initial)


def _read_history_prefix(out: Path, upto: int) -> list:
    path = out / "history.csv"
    if not path.exists():
        return []
    with open(path, encoding="ascii") as fh:
        r = csv.reader(fh)
        head = next(r)
        recs = []
        for row in r:
            it = int(row[0])
            if it >= upto:
                break
            vals = dict(zip(head, row))
            cons = {k: float(v) for k, v in vals.items() if k not in ("iter", "objective", "max_violation", "step_norm") and not k.startswith(("f_", "abs_"))}
            freqs = {k[2:]: float(v) for k, v in vals.items() if k.startswith("f_")}
            coups = {k[4:]: float(v) for k, v in vals.items() if k.startswith("abs_")}
            recs.append(IterationRecord(it, float(vals["objective"]), cons, freqs, coups, float(vals["max_violation"]), float(vals["step_norm"])))
    return recs


def reverify(problem: Problem, result: OptimizationResult) -> tuple:
    """Re-run the pipeline from scratch on the final design.

    Returns (rows, max relative deviation from the last history record).
    """
    fresh = analyze(problem, result.p, result.analysis.basis, result.initial.basis)
    rows = evaluate_all(fresh, problem.specs, result.baselines, make_probes(problem))
    last = result.history[-1]
    dev = 0.0
    obj, cons = split_rows(rows, problem.specs)
    for r in cons:
        ref = last.constraints[r.id]
        dev = max(dev, abs(r.value - ref) / max(abs(ref), 1e-300))
    return rows, dev
