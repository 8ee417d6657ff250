"""Command-line entry point: ``hoadapt <command> ...``.

Exit codes: 0 success, 1 input or configuration error, 2 run did not converge.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checks import SUITES, inputs_from_dir, run_checks
from .config import RunConfig, load_config
from .distortion import default_rule, element_qualities
from .fixtures import generate_fixtures
from .implicit import load_model
from .mesh import MeshFormatError, MeshValidationError, check_validity, load_mesh, save_mesh
from .metric import LocalizationError, load_metric, metric_from_dict
from .objective import MeshObjective
from .solver import SolverPreconditionError, minimize

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
STATS = ("min", "max", "mean", "std")


class InputError(Exception):
    pass


def _existing(path, what: str) -> Path:
    if path is None:
        raise InputError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} file not found: {p}")
    return p


def _load_metric(metric_path, background_path=None):
    path = _existing(metric_path, "metric")
    if background_path is None:
        return load_metric(path)
    doc = json.loads(path.read_text())
    if "analytic" not in doc:
        doc["background_mesh"] = str(_existing(background_path, "background").resolve())
    return metric_from_dict(doc)


def _run_config(args) -> RunConfig:
    cfg = load_config(_existing(args.config, "config")) if args.config else RunConfig()
    return cfg.with_overrides(lam=args.lam, tolerance=args.tol, max_iterations=args.max_iter)


def adapt(mesh, metric, model, cfg: RunConfig):
    """Run the minimization; returns (optimized mesh, report, initial and final quality summaries)."""
    rule = default_rule(mesh, cfg.quadrature_exactness)
    obj = MeshObjective(mesh, metric, model, cfg.penalty(), rule)
    before = element_qualities(mesh, metric, rule).summary()
    x, report = minimize(obj, obj.x0(), cfg.solver())
    out = obj.mesh_at(x)
    after = element_qualities(out, metric, rule).summary()
    return out, report, before, after


def write_quality_table(path, degree: int, before: dict, after: dict) -> None:
    """One row in the layout: degree, then initial/final pairs of min, max, mean, std."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["degree"] + [f"{s}_{t}" for s in STATS for t in ("initial", "final")])
        w.writerow([degree] + [repr(d[s]) for s in STATS for d in (before, after)])


def cmd_adapt(args) -> int:
    mesh = load_mesh(_existing(args.mesh, "mesh"))
    metric = _load_metric(args.metric, args.background)
    model = load_model(_existing(args.model, "model")) if args.model else None
    cfg = _run_config(args)
    if not check_validity(mesh).valid:
        raise InputError("initial mesh has non-positive Jacobians")
    out, report, before, after = adapt(mesh, metric, model, cfg)
    if not check_validity(out).valid:  # the line search should make this unreachable
        print("error: optimized mesh is invalid; not written", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    out_path = Path(args.out or "adapted_mesh.json")
    save_mesh(out, out_path)
    report_path = Path(args.report or out_path.with_name(out_path.stem + "_quality.csv"))
    write_quality_table(report_path, mesh.degree, before, after)
    trace_path = Path(args.trace or report_path.with_name(report_path.stem + "_trace.csv"))
    report.write_csv(trace_path)
    print(f"{report.reason} after {len(report.records) - 1} iterations; "
          f"min quality {before['min']:.4f} -> {after['min']:.4f}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_quality(args) -> int:
    mesh = load_mesh(_existing(args.mesh, "mesh"))
    metric = _load_metric(args.metric, getattr(args, "background", None))
    rep = element_qualities(mesh, metric)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "eta", "quality", "min_pointwise_quality", "inverted"])
        for e in range(mesh.n_elements):
            w.writerow([e, repr(float(rep.eta[e])), repr(float(rep.quality[e])),
                        repr(float(rep.min_pointwise_quality[e])), int(rep.quality[e] == 0.0)])
        for k, v in rep.summary().items():
            w.writerow([k, "", repr(v), "", ""])
    return EXIT_OK


def raster_points(lo, hi, n: int) -> np.ndarray:
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def cmd_implicitize(args) -> int:
    try:
        model = load_model(_existing(args.model, "model"))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.grid < 1:
        raise InputError("--grid must be positive")
    pts = np.vstack([tp.patch.points for lst in model.entities.values() for tp in lst])
    x = raster_points(pts.min(axis=0), pts.max(axis=0), args.grid)
    gamma = model.evaluate(x).value
    names = ["x", "y", "z"][: x.shape[1]]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["gamma", "log10_gamma"])
        with np.errstate(divide="ignore"):
            logs = np.log10(np.abs(gamma))
        for p, g, lg in zip(x, gamma, logs):
            w.writerow([repr(float(c)) for c in p] + [repr(float(g)), repr(float(lg))])
    return EXIT_OK


def cmd_check_derivatives(args) -> int:
    inputs = inputs_from_dir(args.fixtures)
    results = run_checks(inputs, seed=args.seed, corrupt=args.corrupt)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all derivative checks passed" if ok else "derivative checks FAILED")
    return EXIT_OK if ok else EXIT_INPUT


def compare_entry(entry: dict, base: Path, overrides=None) -> dict:
    """Adapt one mesh with the analytic metric and with its discrete sampling."""
    mesh = load_mesh(_existing(base / entry["mesh"], "mesh"))
    model = load_model(_existing(base / entry["model"], "model")) if entry.get("model") else None
    cfg = load_config(_existing(base / entry["config"], "config")) if entry.get("config") else RunConfig()
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    analytic = load_metric(_existing(base / entry["analytic"], "analytic metric"))
    discrete = load_metric(_existing(base / entry["discrete"], "discrete metric"))
    out_a, rep_a, _, _ = adapt(mesh, analytic, model, cfg)
    out_d, rep_d, _, _ = adapt(mesh, discrete, model, cfg)
    # both results are scored with the analytic metric
    qa = element_qualities(out_a, analytic).summary()
    qd = element_qualities(out_d, analytic).summary()
    return {
        "mesh": entry["mesh"],
        "degree": mesh.degree,
        "max_node_distance": float(np.linalg.norm(out_a.nodes - out_d.nodes, axis=1).max()),
        "analytic": qa,
        "discrete": qd,
        "difference": {k: abs(qa[k] - qd[k]) for k in STATS},
        "reasons": [rep_a.reason, rep_d.reason],
    }


def cmd_compare_analytic(args) -> int:
    path = _existing(args.manifest, "manifest")
    doc = json.loads(path.read_text())
    if "compare" not in doc:
        raise InputError(f"{path}: manifest has no 'compare' list")
    overrides = {"lam": args.lam, "tolerance": args.tol, "max_iterations": args.max_iter}
    rows = [compare_entry(e, path.parent, overrides) for e in doc["compare"]]
    text = json.dumps({"comparisons": rows}, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    for r in rows:
        print(f"{r['mesh']}: max node distance {r['max_node_distance']:.3e}, "
              f"mean quality difference {r['difference']['mean']:.3e}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    manifest = generate_fixtures(args.out, scale=args.scale)
    n = sum(len(v) for v in manifest["files"].values())
    print(f"wrote {n} fixture files to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoadapt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)

    p = sub.add_parser("adapt", help="optimize a mesh against a metric and a CAD model")
    p.add_argument("--mesh", required=True)
    p.add_argument("--background", help="background mesh overriding the one named in the metric file")
    p.add_argument("--metric", required=True)
    p.add_argument("--model")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--trace")
    overrides(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("quality", help="per-element quality report")
    p.add_argument("--mesh", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--background")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("implicitize", help="raster the model's implicit function")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_implicitize)

    p = sub.add_parser("check-derivatives", help="finite-difference checks of all derivatives")
    p.add_argument("--fixtures", help="fixture directory (default: build fixtures in memory)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=SUITES, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check_derivatives)

    p = sub.add_parser("compare-analytic", help="adapt with analytic and sampled metrics and compare")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    overrides(p)
    p.set_defaults(func=cmd_compare_analytic)

    p = sub.add_parser("fixtures", help="write the bundled fixture files")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=1.0, help="metric size-normalization factor")
    p.set_defaults(func=cmd_fixtures)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, MeshFormatError, MeshValidationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverPreconditionError, LocalizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
