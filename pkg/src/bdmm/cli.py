"""Command-line interface: ``bdmm <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 validation or parse error,
4 numeric failure (non-convergence, singular information).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .core import DomainBox
from .ergodicity import DEFAULT_N_TRUNC, RateSequences, check_ergodicity
from .inference import (WORKERS_ENV, FitError, FitOptions, StudyConfig,
                        ellipsoid_from_dict, fit_mle, loglik_surface, replicate_seeds, replicate_study)
from .io import export_csv, ingest_tracks_csv, read_trajectory, write_trajectory
from .likelihood import loglik_total, observed_information
from .model.spec import initial_configuration, model_from_config
from .simulate import SimOptions, TruncatedTrajectoryError, simulate

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3, 4

BUILTINS = {"colocalization": "colocalization.json", "colocalization-study": "colocalization_study.json"}


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def _builtin_json(name: str) -> dict:
    if name not in BUILTINS:
        raise UsageError(f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}")
    return json.loads(resources.files("bdmm").joinpath("data", BUILTINS[name]).read_text())


def load_config(spec: str, default_builtin: str = "colocalization") -> dict:
    """A JSON document from a path, ``builtin`` or ``builtin:<name>``."""
    if spec == "builtin":
        return _builtin_json(default_builtin)
    if spec.startswith("builtin:"):
        return _builtin_json(spec.split(":", 1)[1])
    try:
        with open(spec) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"file not found: {spec}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{spec}: invalid JSON: {exc}") from None


def parse_assignments(text) -> dict:
    """'a=1,b=2' -> {'a': 1.0, 'b': 2.0}; repeated flags are merged."""
    out = {}
    for chunk in text or []:
        for item in chunk.split(","):
            item = item.strip()
            if not item:
                continue
            if "=" not in item:
                raise UsageError(f"expected name=value, got {item!r}")
            k, v = item.split("=", 1)
            try:
                out[k.strip()] = float(v)
            except ValueError:
                raise UsageError(f"not a number: {v!r}") from None
    return out


def parse_grid(text: str) -> dict:
    """'p=0:1:50,logsigma=0:3:50' -> {'p': linspace(0,1,50), ...}."""
    grid = {}
    for item in text.split(","):
        try:
            name, rng = item.split("=", 1)
            a, b, n = rng.split(":")
            grid[name.strip()] = np.linspace(float(a), float(b), int(n))
        except ValueError:
            raise UsageError(f"bad grid entry {item!r}; expected name=start:stop:count") from None
    if len(grid) != 2:
        raise UsageError("the grid must name exactly two parameters")
    return grid


def _model(args):
    cfg = load_config(args.model)
    return cfg, model_from_config(cfg)


def _theta(model, overrides):
    unknown = set(overrides) - set(model.param_names)
    if unknown:
        raise UsageError(f"unknown parameters {sorted(unknown)}")
    return model.theta(overrides)


def _fmt_vec(names, vals):
    return ", ".join(f"{n}={v:.6g}" for n, v in zip(names, vals))


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, model = _model(args)
    theta = _theta(model, parse_assignments(args.theta))
    x0_ss, sim_seed = replicate_seeds(args.seed, 0)
    if args.x0 == "builtin":
        x0_spec = cfg.get("x0")
    elif args.x0 == "empty":
        x0_spec = None
    else:
        x0_spec = load_config(args.x0)
    x0 = initial_configuration(x0_spec, model, np.random.default_rng(x0_ss))
    opts = SimOptions(args.horizon, args.dt, sim_seed, args.max_events)
    try:
        traj = simulate(model, theta, x0, opts)
    except TruncatedTrajectoryError as exc:
        write_trajectory(exc.partial, args.out)
        raise NumericFailure(f"{exc}; partial trajectory written to {args.out}") from None
    write_trajectory(traj, args.out)
    c = traj.counts()
    print(f"simulated [0, {traj.horizon}] with {len(traj.tracks)} tracks: "
          f"{c['birth']} births, {c['death']} deaths, {c['mutation']} mutations; "
          f"final cardinality {traj.final_config().n}")
    print(f"written to {args.out}")
    return EXIT_OK


def cmd_loglik(args) -> int:
    _, model = _model(args)
    theta = _theta(model, parse_assignments(args.theta))
    traj = read_trajectory(args.traj)
    bd = loglik_total(traj, model, theta)
    for k in ("birth", "death", "mutation", "move", "total"):
        print(f"{k:>9}: {getattr(bd, k):.12g}")
    for d in bd.diagnostics:
        print(f"diagnostic: {d}")
    if args.out:
        Path(args.out).write_text(json.dumps(bd.as_dict() | {"diagnostics": list(bd.diagnostics)}, indent=2) + "\n")
    return EXIT_OK


def cmd_fit(args) -> int:
    _, model = _model(args)
    theta0 = _theta(model, parse_assignments(args.theta0))
    free = [n.strip() for n in args.free.split(",") if n.strip()]
    unknown = set(free) - set(model.param_names)
    if unknown or not free:
        raise UsageError(f"--free must list model parameters; unknown {sorted(unknown)}")
    traj = read_trajectory(args.traj)
    try:
        fit = fit_mle(traj, model, free, theta0, FitOptions(method=args.method, keep_trace=False))
    except FitError as exc:
        raise NumericFailure(str(exc)) from None
    if args.out:
        Path(args.out).write_text(json.dumps(fit.to_dict(), indent=2) + "\n")
    print(f"loglik: {fit.loglik:.12g} (start {fit.loglik0:.12g}), evaluations: {fit.n_evals}")
    se = fit.std_errors
    for i, n in enumerate(free):
        v = fit.theta_hat[n]
        extra = f" +/- {se[i]:.6g}" if se is not None else ""
        line = f"{n} = {v:.8g}{extra}"
        if n.startswith("log"):
            line += f"   ({n[3:]} = exp({n}) = {math.exp(v):.6g})"
        print(line)
    for w in fit.warnings:
        print(f"warning: {w}")
    if not fit.converged or fit.covariance is None:
        raise NumericFailure("; ".join(fit.warnings) or "fit failed")
    return EXIT_OK


def cmd_fisher(args) -> int:
    _, model = _model(args)
    theta = _theta(model, parse_assignments(args.theta))
    traj = read_trajectory(args.traj)
    info = observed_information(traj, model, theta)
    names = list(model.param_names)
    if args.free:
        names = [n.strip() for n in args.free.split(",") if n.strip()]
        unknown = set(names) - set(model.param_names)
        if unknown:
            raise UsageError(f"unknown parameters {sorted(unknown)}")
    J = info.restrict(names)
    width = max(12, *(len(n) for n in names))
    print(" " * width + "".join(f"{n:>{width + 2}}" for n in names))
    for n, row in zip(names, J):
        print(f"{n:>{width}}" + "".join(f"{v:>{width + 2}.6g}" for v in row))
    if args.out:
        export_csv([[n, *row] for n, row in zip(names, J)], args.out, columns=["param", *names])
    return EXIT_OK


def cmd_ellipse(args) -> int:
    fit = load_config(args.fit)
    try:
        ell = ellipsoid_from_dict(fit, args.level)
    except ValueError as exc:
        raise NumericFailure(str(exc)) from None
    if len(ell.names) < 2:
        raise UsageError("an ellipse polyline needs at least two free parameters")
    pts = ell.boundary(args.points)
    export_csv(pts.tolist(), args.out, columns=list(ell.names[:2]))
    print(f"centre: {_fmt_vec(ell.names, ell.center)}; radius^2 = {ell.radius2:.10g} "
          f"(chi-square, {len(ell.names)} dof, level {args.level})")
    print(f"{len(pts)}-point boundary written to {args.out}")
    return EXIT_OK


def cmd_surface(args) -> int:
    _, model = _model(args)
    theta = _theta(model, parse_assignments(args.theta))
    grid = parse_grid(args.grid)
    unknown = set(grid) - set(model.param_names)
    if unknown:
        raise UsageError(f"unknown parameters {sorted(unknown)}")
    traj = read_trajectory(args.traj)
    rows = loglik_surface(traj, model, grid, theta)
    export_csv(rows, args.out, columns=[*grid.keys(), "loglik"])
    best = max(rows, key=lambda r: r[2])
    names = list(grid)
    print(f"{len(rows)} grid points written to {args.out}; grid maximum at "
          f"{names[0]}={best[0]:.6g}, {names[1]}={best[1]:.6g} (loglik {best[2]:.10g})")
    return EXIT_OK


def load_study_config(spec: str, replicates=None, seed=None) -> StudyConfig:
    doc = load_config(spec, default_builtin="colocalization-study")
    m = doc.get("model")
    if isinstance(m, str):
        if not m.startswith("builtin") and not os.path.isabs(m) and not spec.startswith("builtin"):
            m = str(Path(spec).parent / m)
        doc["model"] = load_config(m)
    if replicates is not None:
        doc["replicates"] = replicates
    if seed is not None:
        doc["seed"] = seed
    return StudyConfig.from_dict(doc)


def cmd_study(args) -> int:
    cfg = load_study_config(args.config, args.replicates, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(i, n):
        if not args.quiet:
            print(f"\rreplicate {i}/{n}", end="", file=sys.stderr, flush=True)

    report = replicate_study(cfg, workers=args.workers, emit_ellipses=args.emit_ellipses, progress=progress)
    if not args.quiet:
        print(file=sys.stderr)
    free = list(report.free)
    rows = []
    for row in report.rows:
        est = row.get("estimate") or [float("nan")] * len(free)
        rows.append([row["replicate"], *est, row.get("loglik", float("nan")), int(bool(row.get("converged"))),
                     int(bool(row.get("covered"))), int(row["ok"]), row["error"]])
    export_csv(rows, out / "estimates.csv",
               columns=["replicate", *free, "loglik", "converged", "covered", "ok", "error"])
    export_csv([[n, *r] for n, r in zip(free, report.mean_covariance)], out / "mean_covariance.csv",
               columns=["param", *free])
    (out / "coverage.txt").write_text(report.summary() + "\n")
    if len(free) >= 2 and report.rows and np.all(np.isfinite(report.mean_covariance)):
        export_csv(report.mean_ellipsoid().boundary().tolist(), out / "mean_ellipse.csv", columns=free[:2])
    if args.emit_ellipses:
        edir = out / "ellipses"
        edir.mkdir(exist_ok=True)
        for row in report.rows:
            if "ellipse" in row:
                export_csv(row["ellipse"], edir / f"ellipse_{row['replicate']:04d}.csv", columns=free[:2])
    print(report.summary())
    print(f"outputs written to {out}")
    if not report.valid:
        raise NumericFailure(f"{report.n_failed} of {len(report.rows)} replicates failed (> 10%): run invalid")
    return EXIT_OK


def cmd_check_ergodicity(args) -> int:
    _, model = _model(args)
    theta = _theta(model, parse_assignments(args.theta))
    rep = check_ergodicity(RateSequences.from_model(model, theta, args.n_trunc))
    print(rep.render())
    return EXIT_OK


def _parse_domain(text):
    if text is None:
        return None
    try:
        lo, hi = text.split(":")
        return DomainBox([float(v) for v in lo.split(",")], [float(v) for v in hi.split(",")], "reflective")
    except ValueError:
        raise UsageError("--domain must look like 0,0:250,283") from None


def cmd_ingest(args) -> int:
    labels = [s for s in args.labels.split(",")] if args.labels else None
    traj = ingest_tracks_csv(args.csv, args.dt_frame, domain=_parse_domain(args.domain), label_names=labels,
                             coords=tuple(args.coords.split(",")), bridge_gaps=args.bridge_gaps)
    write_trajectory(traj, args.out)
    c = traj.counts()
    print(f"ingested {len(traj.tracks)} tracks over [0, {traj.horizon}] s: {c['birth']} births, "
          f"{c['death']} deaths, {c['mutation']} mutations; labels {list(traj.label_names)}")
    print(f"written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

MODEL_HELP = ("model config (JSON path, or 'builtin' for the packaged colocalization model); "
              "see docs/model_config.md for the schema")
THETA_HELP = ("parameter overrides name=value[,name=value...]; they take precedence over the "
              "initial values in the config's params section (repeatable)")
TRAJ_SCHEMA = """\
trajectory file (JSON Lines, schema_version 1):
  line 1  {"type": "header", "schema_version": 1, "domain": {...}, "label_names": [...],
           "grid_dt": dt, "horizon": T, "model_fingerprint": "..."}
  then    {"type": "track", "id": i, "labels": [[t0, t1, label], ...], "anchor": [...],
           "samples": [[t, x, y], ...]}   (one line per particle)
  then    {"type": "event", "t": t, "kind": "birth|death|mutation", "id": i, ...}
          birth: location, label; death: label; mutation: label_from, label_to
"""


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="bdmm", formatter_class=fmt,
                                description="Simulation and likelihood inference for birth-death-move "
                                            "processes with mutations.",
                                epilog="exit codes: 0 ok, 2 usage error, 3 validation/parse error, "
                                       "4 numeric failure")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a trajectory", formatter_class=fmt, epilog=TRAJ_SCHEMA +
                       "\nx0 file: {\"particles\": [{\"id\": 0, \"location\": [x, y], \"label\": \"name\"}, ...]}"
                       "\n     or {\"uniform\": {\"label\": count, ...}} (placed with the run's seed)")
    s.add_argument("--model", required=True, help=MODEL_HELP)
    s.add_argument("--theta", action="append", help=THETA_HELP)
    s.add_argument("--x0", default="builtin",
                   help="initial configuration: JSON file, 'builtin' (the model config's x0 entry) or 'empty'")
    s.add_argument("--horizon", type=float, required=True, help="time horizon T in seconds")
    s.add_argument("--dt", type=float, required=True, help="Euler grid step in seconds")
    s.add_argument("--seed", type=int, default=0, help="master seed; fully determines the output")
    s.add_argument("--max-events", type=int, default=1_000_000, help="safety cap on the number of jumps")
    s.add_argument("--out", required=True, help="output trajectory file (JSON Lines)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("loglik", help="print the log-likelihood breakdown", formatter_class=fmt,
                       epilog=TRAJ_SCHEMA)
    s.add_argument("--model", required=True, help=MODEL_HELP)
    s.add_argument("--theta", action="append", help=THETA_HELP)
    s.add_argument("--traj", required=True, help="trajectory file")
    s.add_argument("--out", help="optional JSON file for the breakdown")
    s.set_defaults(func=cmd_loglik)

    s = sub.add_parser("fit", help="maximum-likelihood fit of selected parameters", formatter_class=fmt,
                       epilog="fit file (JSON): free, theta_hat, estimate, loglik, loglik0, breakdown, "
                              "information, covariance, std_errors, n_evals, converged, message, warnings")
    s.add_argument("--model", required=True, help=MODEL_HELP)
    s.add_argument("--traj", required=True, help="trajectory file")
    s.add_argument("--free", required=True, help="comma-separated parameters to estimate")
    s.add_argument("--theta0", action="append", help="starting values name=value,...; override the config")
    s.add_argument("--method", default="nelder-mead", choices=["nelder-mead", "bfgs"],
                   help="optimizer (bfgs uses the analytic score)")
    s.add_argument("--out", help="output fit file (JSON)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("fisher", help="observed information matrix", formatter_class=fmt)
    s.add_argument("--model", required=True, help=MODEL_HELP)
    s.add_argument("--theta", action="append", help=THETA_HELP)
    s.add_argument("--traj", required=True, help="trajectory file")
    s.add_argument("--free", help="restrict to these comma-separated parameters")
    s.add_argument("--out", help="optional CSV output (param, <names>...)")
    s.set_defaults(func=cmd_fisher)

    s = sub.add_parser("ellipse", help="confidence ellipse polyline from a fit file", formatter_class=fmt,
                       epilog="output CSV: two columns named after the first two free parameters; "
                              "the polyline is closed (first row == last row)")
    s.add_argument("--fit", required=True, help="fit file written by 'fit --out'")
    s.add_argument("--level", type=float, default=0.95, help="confidence level in (0, 1)")
    s.add_argument("--points", type=int, default=361, help="number of polyline points")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_ellipse)

    s = sub.add_parser("surface", help="log-likelihood on a 2-parameter grid", formatter_class=fmt,
                       epilog="output CSV columns: <param1>, <param2>, loglik")
    s.add_argument("--model", required=True, help=MODEL_HELP)
    s.add_argument("--theta", action="append", help=THETA_HELP)
    s.add_argument("--traj", required=True, help="trajectory file")
    s.add_argument("--grid", required=True, help="two entries name=start:stop:count, e.g. p=0:1:50,logsigma=0:3:50")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_surface)

    s = sub.add_parser("study", help="replicate simulate-and-fit study", formatter_class=fmt,
                       epilog="study config (JSON): model (dict, path or 'builtin:colocalization'), free, "
                              "truth, theta0, x0, horizon, grid_dt, replicates, seed, level, method\n"
                              "outputs: estimates.csv, coverage.txt, mean_covariance.csv, mean_ellipse.csv, "
                              "and ellipses/ellipse_NNNN.csv with --emit-ellipses\n"
                              f"default worker count: ${WORKERS_ENV} or the available CPUs")
    s.add_argument("--config", default="builtin", help="study config JSON or 'builtin'")
    s.add_argument("--replicates", type=int, help="override the number of replicates")
    s.add_argument("--seed", type=int, help="override the master seed")
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or CPU count)")
    s.add_argument("--emit-ellipses", action="store_true", help="write one ellipse polyline per replicate")
    s.add_argument("--quiet", action="store_true", help="no progress output")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("check-ergodicity", help="check sufficient ergodicity conditions", formatter_class=fmt)
    s.add_argument("--model", required=True, help=MODEL_HELP)
    s.add_argument("--theta", action="append", help=THETA_HELP)
    s.add_argument("--n-trunc", type=int, default=DEFAULT_N_TRUNC, help="series truncation index (>= 10)")
    s.set_defaults(func=cmd_check_ergodicity)

    s = sub.add_parser("ingest", help="convert tracked-particle CSV into a trajectory file",
                       formatter_class=fmt,
                       epilog="CSV columns: frame (integer), track_id (integer), coordinate columns "
                              "(default x,y), label (string or integer)\n" + TRAJ_SCHEMA)
    s.add_argument("--csv", required=True, help="input CSV")
    s.add_argument("--dt-frame", type=float, required=True, help="seconds per frame (no default)")
    s.add_argument("--coords", default="x,y", help="coordinate column names")
    s.add_argument("--labels", help="label alphabet in order, comma separated (default: sorted CSV labels)")
    s.add_argument("--domain", help="box as lo1,lo2:hi1,hi2 (default: bounding box of the data)")
    s.add_argument("--bridge-gaps", action="store_true", help="interpolate over missing frames")
    s.add_argument("--out", required=True, help="output trajectory file")
    s.set_defaults(func=cmd_ingest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except np.linalg.LinAlgError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


run = main

if __name__ == "__main__":
    sys.exit(main())
