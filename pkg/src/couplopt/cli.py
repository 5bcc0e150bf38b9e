"""Command-line interface.

Commands::

    couplopt analyze <cfg>
    couplopt optimize <cfg> [--resume state.npz]
    couplopt robustness <cfg> [--mesh final.mesh] [--delta-nm 50]
    couplopt gradcheck <cfg> --constraint <id> [--params 0,5,9] [--step 1e-9]

All CSV files use a fixed column order, a header row and Python ``repr``
floats (locale independent, round-trip exact).  Exit codes: 0 success,
1 usage/config error, 2 infeasible at the iteration limit, 3 mode lost,
4 mesh failure.

Columns::

    modes.csv        label, index, f_hz
    couplings.csv    iter, kind, n, m, l, value
    history.csv      iter, objective, <constraint ids>, f_<label>, abs_<coupling id>,
                     max_violation, step_norm
    constraints.csv  iter, constraint_id, value, feasible, bound
    robustness.csv   quantity, variant, delta_m, value, initial_value
    gradcheck.csv    constraint_id, j, analytic, fd, rel_err
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

THREADS_ENV = "COUPLOPT_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("couplopt")


def _set_threads(n: int | None) -> None:
    # only effective when set before numpy/scipy load their BLAS
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg_path: Path, extra_inputs=()) -> None:
    from . import __version__

    inputs = {str(cfg_path): _sha256(cfg_path)}
    for p in extra_inputs:
        if p is not None and Path(p).exists():
            inputs[str(p)] = _sha256(p)
    manifest = {
        "command": command,
        "config": str(cfg_path),
        "output_dir": str(out),
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "input_hashes": inputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="ascii")


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _mesh_input(cfg, cfg_path: Path):
    if cfg.has("geometry", "mesh"):
        p = Path(cfg.get("geometry", "mesh"))
        return p if p.is_absolute() else cfg_path.parent / p
    return None


def _load(args):
    from .config import load_config
    from .optim import build_problem

    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    problem = build_problem(cfg, cfg_path.parent, getattr(args, "max_iter", None))
    return cfg, cfg_path, problem


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# analyze


def write_modes_csv(path, basis) -> None:
    names = {i: name for name, i in basis.labels.items()}
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = _writer(fh)
        w.writerow(["label", "index", "f_hz"])
        for i, f in enumerate(basis.frequencies):
            w.writerow([names.get(i, f"mode{i}"), i, repr(float(f))])


def write_mode_shapes(path, mesh, system, basis) -> None:
    """Per-node displacement of every computed mode (``modeshapes 1`` text)."""
    names = {i: name for name, i in basis.labels.items()}
    lines = ["modeshapes 1", f"nodes {len(mesh.nodes)}", f"modes {basis.k}"]
    for i in range(basis.k):
        u = system.expand(basis.vectors[:, i]).reshape(-1, 3)
        lines.append(f"mode {names.get(i, f'mode{i}')} {i} {float(basis.frequencies[i])!r}")
        lines.extend(f"disp {n} {a!r} {b!r} {c!r}" for n, (a, b, c) in enumerate(u.tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _coupling_rows(problem, analysis, it: int = 0) -> list:
    import itertools

    from .coupling import compute_tensor

    rows = []
    specs = [s for s in problem.specs if s.triples()]
    if specs:
        seen = set()
        for s in specs:
            for t in s.triples():
                if t not in seen:
                    seen.add(t)
                    rows.append((it, "alpha", t, analysis.tensor[t]))
            if s.aggregate != "alpha":
                rows.append((it, s.aggregate, s.labels, analysis.tensor.evaluate(s.aggregate, s.labels)))
    else:
        labels = sorted(problem.labels, key=lambda l: problem.labels[l])
        triples = [t for t in itertools.product(labels, repeat=3) if problem.labels[t[1]] <= problem.labels[t[2]]]
        tensor = compute_tensor(analysis.fields, triples)
        rows = [(it, "alpha", t, tensor[t]) for t in triples]
    return rows


def cmd_analyze(args) -> int:
    import numpy as np

    from .coupling import ModalFields, compute_tensor, write_coupling_report
    from .eigen import solve_modes
    from .mesh import write_mesh
    from .optim import analyze

    cfg, cfg_path, problem = _load(args)
    out = _out_dir(args, "analysis")
    count = max(problem.n_modes, cfg.integer("analysis", "modes", 10))
    problem_modes = problem.n_modes
    analysis = analyze(problem, np.zeros(problem.n_params))
    basis = analysis.basis
    if count > problem_modes:
        basis = solve_modes(analysis.system, min(count, analysis.system.n)).with_labels(problem.labels)
        analysis.basis = basis
        analysis.fields = ModalFields(analysis.mesh, problem.material, analysis.system, basis)
        analysis.tensor = compute_tensor(analysis.fields, problem.triples())
    write_modes_csv(out / "modes.csv", basis)
    write_coupling_report(out / "couplings.csv", _coupling_rows(problem, analysis))
    write_mode_shapes(out / "modeshapes.txt", analysis.mesh, analysis.system, basis)
    write_mesh(analysis.mesh, out / "mesh.txt")
    write_manifest(out, "analyze", cfg_path, [_mesh_input(cfg, cfg_path)])
    for name, i in sorted(basis.labels.items(), key=lambda kv: kv[1]):
        print(f"{name:>12s}  mode {i:3d}  {basis.frequency(name):.6e} Hz")
    return 0


# ----------------------------------------------------------------------------
# optimize


def cmd_optimize(args) -> int:
    from .constraints import write_constraint_report
    from .coupling import write_coupling_report
    from .mesh import write_mesh
    from .optim import EXIT_OK, reverify, run_optimization, write_history
    from .shape_param import write_design

    cfg, cfg_path, problem = _load(args)
    out = _out_dir(args, "optimization")

    def progress(rec):
        print(f"iter {rec.iter:4d}  objective {rec.objective:.6e}  max violation {rec.max_violation:+.3e}  step {rec.step_norm:.3e}", flush=True)

    result = run_optimization(problem, out, resume=args.resume, progress=None if args.quiet else progress)
    write_history(out / "history.csv", result.history)
    records = []
    coupling_rows = []
    agg = {s.id: s for s in problem.specs if s.triples()}
    for rec in result.history:
        for cid, g in rec.constraints.items():
            records.append((rec.iter, _Row(cid, g)))
        for sid, v in rec.couplings.items():
            s = agg[sid]
            coupling_rows.append((rec.iter, "abs_" + s.aggregate, s.labels, v))
    write_constraint_report(out / "constraints.csv", records)
    write_coupling_report(out / "couplings.csv", coupling_rows)
    if result.mesh is not None:
        write_mesh(result.mesh, out / "final.mesh")
        write_design(out / "final_design.txt", result.p)
    write_manifest(out, "optimize", cfg_path, [_mesh_input(cfg, cfg_path), args.resume])
    print(f"status {result.status}: {result.message}")
    if result.status == EXIT_OK and result.analysis is not None:
        _, dev = reverify(problem, result)
        print(f"from-scratch re-verification: max relative deviation {dev:.3e}")
    elif result.history:
        last = result.history[-1]
        bad = {k: v for k, v in last.constraints.items() if v > problem.feas_tol}
        for k, v in sorted(bad.items(), key=lambda kv: -kv[1])[:10]:
            print(f"  violated {k}: {v:+.4e}")
    return result.status


class _Row:
    def __init__(self, cid, value):
        self.id, self.value, self.bound = cid, value, 0.0


# ----------------------------------------------------------------------------
# robustness


def cmd_robustness(args) -> int:
    import numpy as np

    from .coupling import ModalFields, compute_tensor
    from .eigen import apply_tracking, solve_modes, track_modes
    from .fem import assemble_system
    from .mesh import ElementInversionError, offset_boundary, read_mesh
    from .optim import EXIT_MESH, analyze

    cfg, cfg_path, problem = _load(args)
    out = _out_dir(args, "robustness")
    initial = analyze(problem, np.zeros(problem.n_params))
    nominal_mesh = read_mesh(args.mesh) if args.mesh else initial.mesh
    delta = args.delta_nm * 1e-9
    specs = [s for s in problem.specs if s.triples()]
    triples = problem.triples()
    results = {}
    ref = initial.basis
    for variant, d in (("nominal", 0.0), ("dilated", abs(delta)), ("eroded", 0.0 - abs(delta) if delta else 0.0)):
        try:
            mesh = offset_boundary(nominal_mesh, d)
        except ElementInversionError as exc:
            print(f"error: {variant} mesh inverts: {exc}", file=sys.stderr)
            return EXIT_MESH
        system = assemble_system(mesh, problem.material)
        basis = solve_modes(system, min(problem.n_modes, system.n))
        if basis.vectors.shape[0] == ref.vectors.shape[0]:
            assignment = track_modes(basis, ref, initial.basis, problem.tracking, list(problem.labels))
            basis = apply_tracking(basis, ref, initial.basis, assignment, problem.tracking)
        else:
            basis = basis.with_labels(problem.labels)
        if variant == "nominal":
            ref = basis
        fields = ModalFields(mesh, problem.material, system, basis)
        tensor = compute_tensor(fields, triples)
        vals = {f"f_{l}": basis.frequency(l) for l in problem.labels}
        for s in specs:
            vals[f"abs_{s.id}"] = abs(tensor.evaluate(s.aggregate, s.labels))
        results[variant] = (d, vals)
    init_vals = {f"f_{l}": initial.basis.frequency(l) for l in problem.labels}
    for s in specs:
        init_vals[f"abs_{s.id}"] = abs(initial.tensor.evaluate(s.aggregate, s.labels))
    with open(out / "robustness.csv", "w", newline="", encoding="ascii") as fh:
        w = _writer(fh)
        w.writerow(["quantity", "variant", "delta_m", "value", "initial_value"])
        for q in results["nominal"][1]:
            for variant in ("nominal", "dilated", "eroded"):
                d, vals = results[variant]
                w.writerow([q, variant, repr(d), repr(float(vals[q])), repr(float(init_vals[q]))])
    write_manifest(out, "robustness", cfg_path, [_mesh_input(cfg, cfg_path), args.mesh])
    for q in results["nominal"][1]:
        print(q, "  ".join(f"{v}={results[v][1][q]:.4e}" for v in ("nominal", "dilated", "eroded")))
    return 0


# ----------------------------------------------------------------------------
# gradcheck


def gradcheck(problem, constraint_id: str, params=None, step: float = 1e-9, p=None) -> list:
    """Adjoint vs full-pipeline central differences for one constraint.

    Returns rows (row-id, j, analytic, fd, rel-err).  Each FD evaluation
    re-assembles, re-solves and re-tracks the modes.  The relative error
    is floored at 1e-3 of the row's largest gradient entry.
    """
    import numpy as np

    from .constraints import capture_baselines, evaluate_all, evaluate_spec
    from .optim import analyze, make_probes

    spec = next((s for s in problem.specs if s.id == constraint_id), None)
    if spec is None:
        raise KeyError(f"unknown constraint id {constraint_id!r}; known: {[s.id for s in problem.specs]}")
    p = np.zeros(problem.n_params) if p is None else np.asarray(p, float)
    initial = analyze(problem, np.zeros(problem.n_params))
    base = capture_baselines(initial, problem.specs)
    probes = make_probes(problem)
    here = analyze(problem, p, initial.basis, initial.basis)
    rows = evaluate_spec(here, spec, base, probes, gradients=True)
    G = np.array([r.gradient for r in rows])
    if params is None:
        score = np.max(np.abs(G), axis=0)
        params = sorted(np.argsort(-score, kind="stable")[:5].tolist())
    scale = np.max(np.abs(G), axis=1) if G.size else np.zeros(0)
    out = []
    for j in params:
        vals = []
        for sgn in (1.0, -1.0):
            q = p.copy()
            q[j] += sgn * step
            a = analyze(problem, q, here.basis, initial.basis)
            vals.append(np.array([r.value for r in evaluate_spec(a, spec, base, probes, gradients=False)]))
        fd = (vals[0] - vals[1]) / (2 * step)
        for k, r in enumerate(rows):
            an = float(G[k, j])
            # entries far below the row's gradient scale compare in absolute terms
            den = max(abs(an), abs(fd[k]), 1e-3 * scale[k])
            rel = abs(an - fd[k]) / den if den > 0 else 0.0
            out.append((r.id, int(j), an, float(fd[k]), rel))
    return out


def cmd_gradcheck(args) -> int:
    cfg, cfg_path, problem = _load(args)
    out = _out_dir(args, "gradcheck")
    params = [int(t) for t in args.params.split(",")] if args.params else None
    try:
        rows = gradcheck(problem, args.constraint, params, args.step)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    with open(out / "gradcheck.csv", "w", newline="", encoding="ascii") as fh:
        w = _writer(fh)
        w.writerow(["constraint_id", "j", "analytic", "fd", "rel_err"])
        for cid, j, an, fd, rel in rows:
            w.writerow([cid, j, repr(float(an)), repr(float(fd)), repr(float(rel))])
    write_manifest(out, "gradcheck", cfg_path, [_mesh_input(cfg, cfg_path)])
    worst = max((r[4] for r in rows), default=0.0)
    print(f"{len(rows)} entries, max relative error {worst:.3e}")
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="couplopt",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"Thread count defaults to ${THREADS_ENV} when --threads is not given.",
    )
    ap.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="problem configuration file")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("analyze", help="modal analysis and coupling report")
    common(p)
    p.set_defaults(func=cmd_analyze)
    p = sub.add_parser("optimize", help="run the shape optimization")
    common(p)
    p.add_argument("--max-iter", type=int, default=None, help="override [optimizer] max_iter")
    p.add_argument("--resume", default=None, help="checkpoint state .npz to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_optimize)
    p = sub.add_parser("robustness", help="dilate/erode study")
    common(p)
    p.add_argument("--mesh", default=None, help="mesh to study (default: configured geometry)")
    p.add_argument("--delta-nm", type=float, default=50.0, help="boundary offset in nm")
    p.set_defaults(func=cmd_robustness)
    p = sub.add_parser("gradcheck", help="adjoint vs finite-difference dump")
    common(p)
    p.add_argument("--constraint", required=True, help="constraint id from [constraints]")
    p.add_argument("--params", default=None, help="comma-separated parameter indices")
    p.add_argument("--step", type=float, default=1e-9, help="FD step in meters")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .config import ConfigError

    try:
        return int(args.func(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
