"""Command line entry point ``perpetuity``.

Exit codes: 0 success, 1 domain error (invalid model, failed check, numerical
failure), 2 usage error.  Every run writes ``manifest.json`` into ``--out-dir``,
also when it fails.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PerpetuityError

SCHEMA_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n",
                    encoding="utf-8")
    return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _model(args):
    from .model import model_from_dict
    return model_from_dict(_load_json(args.model))


def _density(args, spec):
    from .density import density_from_dict, invariant_density
    if getattr(args, "density", None):
        return density_from_dict(_load_json(args.density))
    return invariant_density(spec)


# --------------------------------------------------------------------------
# subcommands; each returns (exit code, list of written files, extra manifest fields)


def cmd_validate(args, out: Path):
    from .model import validate_model
    spec = _model(args)
    probes = None
    if args.probe_points:
        probes = np.asarray(_load_json(args.probe_points), dtype=float)
    rep = validate_model(spec, probes)
    doc = {"schema_version": SCHEMA_VERSION, **rep.as_dict()}
    print(json.dumps(doc, indent=2))
    path = _write_json(out / "validation.json", doc)
    return (0 if rep.ok else 1), [path], {}


def cmd_invariant_density(args, out: Path):
    from .density import density_to_dict, invariant_density
    dens = invariant_density(_model(args))
    doc = density_to_dict(dens)
    path = _write_json(Path(args.out) if args.out else out / "density.json", doc)
    print(json.dumps({"provenance": doc["provenance"], "K": doc["K"], "out": str(path)}))
    return 0, [path], {}


def cmd_check_finiteness(args, out: Path):
    from .finiteness import check_finiteness
    spec = _model(args)
    eps = args.epsilons or (0.5, 0.25, 0.1, 0.01)
    verdict = check_finiteness(spec, _density(args, spec), eps)
    doc = {"schema_version": SCHEMA_VERSION, **verdict.as_dict()}
    print(json.dumps(doc, indent=2, default=_jsonable))
    path = _write_json(Path(args.out) if args.out else out / "finiteness.json", doc)
    return 0, [path], {}


def cmd_support_bounds(args, out: Path):
    from .finiteness import support_bounds
    spec = _model(args)
    box = None
    if args.box:
        box = (args.box[: spec.d], args.box[spec.d:])
    dens = None
    if box is None:
        try:
            dens = _density(args, spec)
        except PerpetuityError:
            dens = None
    sb = support_bounds(spec, box, dens)
    doc = {"schema_version": SCHEMA_VERSION, "lower": sb.lower,
           "upper": "infinity" if np.isinf(sb.upper) else sb.upper,
           "box": {"lower": list(sb.box[0]), "upper": list(sb.box[1])},
           "diagnostics": sb.diagnostics}
    print(json.dumps(doc, indent=2, default=_jsonable))
    path = _write_json(Path(args.out) if args.out else out / "support.json", doc)
    return 0, [path], {}


def _moments(measure) -> dict:
    z = measure.z[:, 0]
    x = measure.x
    cov = np.cov(np.stack([z, x]))
    return {"n": int(measure.n), "mean_z": float(z.mean()), "mean_x": float(x.mean()),
            "var_z": float(cov[0, 0]), "var_x": float(cov[1, 1]), "cov_zx": float(cov[0, 1])}


def cmd_simulate_reverse(args, out: Path):
    from .estimators import measure_from_path, write_ecdf_csv, write_hist2d_csv
    from .finiteness import Verdict, check_finiteness
    from .paths import PathConfig, dump_path, reverse_from_forward, simulate_reversed
    import warnings

    spec = _model(args)
    cfg = PathConfig(args.T, args.delta, seed=args.seed, stream_id=args.stream_id)
    if args.method == "a":
        dens = _density(args, spec)
        v = check_finiteness(spec, dens)
        if v.verdict is Verdict.INFINITE:
            raise PerpetuityError("the perpetuity is almost surely infinite for this model")
        if v.verdict is not Verdict.FINITE:
            warnings.warn("finiteness of the perpetuity could not be established")
        path = simulate_reversed(spec, dens, cfg, [args.x])
    else:
        path = reverse_from_forward(spec, cfg, [args.x], z0=args.z0)
    measure = measure_from_path(path, args.x)
    files = [write_ecdf_csv(measure, out / "ecdf.csv"),
             write_hist2d_csv(measure, out / "hist2d.csv", bins=args.bins)]
    summary = {"schema_version": SCHEMA_VERSION, "method": args.method.upper(), "x": args.x,
               "T": args.T, "delta": args.delta, **_moments(measure),
               "reflections": path.reflections, "diagnostics": path.diagnostics}
    files.append(_write_json(out / "summary.json", summary))
    if args.dump_paths:
        dump_path(path, out / "paths.bin")
        files.append(out / "paths.bin")
    return 0, files, {}


def cmd_simulate_naive(args, out: Path):
    from .estimators import (EmpiricalJointMeasure, MeasureKind, default_truncation,
                             naive_samples, write_ecdf_csv, write_hist2d_csv)
    from .finiteness import Verdict, check_finiteness
    from .paths import PathConfig

    spec = _model(args)
    dens = _density(args, spec)
    v = check_finiteness(spec, dens)
    if v.verdict is Verdict.INFINITE:
        raise PerpetuityError("the perpetuity is almost surely infinite for this model")
    trunc = args.trunc_T if args.trunc_T is not None else default_truncation(v.kappa)
    cfg = PathConfig(trunc, args.delta, seed=args.seed)
    chunk = 500
    starts = list(range(0, args.paths, chunk))

    def work(s):
        return naive_samples(spec, dens, cfg, min(chunk, args.paths - s), s, chunk=chunk)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        parts = list(pool.map(work, starts))
    z = np.concatenate([p[0] for p in parts])
    x = np.concatenate([p[1] for p in parts])
    measure = EmpiricalJointMeasure(z, x, MeasureKind.IID, float(args.paths))
    files = [write_ecdf_csv(measure, out / "ecdf.csv"),
             write_hist2d_csv(measure, out / "hist2d.csv", bins=args.bins)]
    summary = {"schema_version": SCHEMA_VERSION, "method": "naive", "paths": args.paths,
               "trunc_T": trunc, "kappa": v.kappa, "delta": args.delta, **_moments(measure)}
    files.append(_write_json(out / "summary.json", summary))
    return 0, files, {}


def cmd_pde_solve(args, out: Path):
    import csv
    from .pde import PDEGrid, solve_cdf
    spec = _model(args)
    gdoc = {k: v for k, v in _load_json(args.grid).items() if k != "schema_version"}
    grid = PDEGrid(**gdoc)
    sol = solve_cdf(spec, grid, scheme=args.scheme)
    path = Path(args.out) if args.out else out / "g.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "x", "g"])
        for j, zv in enumerate(grid.z):
            for i, xv in enumerate(grid.x):
                w.writerow([repr(float(zv)), repr(float(xv)), repr(float(sol.g[j, i]))])
    meta = {"schema_version": SCHEMA_VERSION, "residual_norm": sol.residual_norm, **sol.stats}
    files = [path, _write_json(out / "pde_meta.json", meta)]
    return 0, files, {}


def cmd_bench(args, out: Path):
    from .bench import BenchConfig, dump_report, run_full, write_trials_csv
    doc = _load_json(args.config) if args.config else {}
    cfg = BenchConfig.from_dict(doc)
    methods = tuple(m.upper() for m in (args.methods or ["A", "B"]))
    rep = run_full(cfg, methods, naive=not args.no_naive)
    files = [dump_report(rep, Path(args.out) if args.out else out / "report.json")]
    for m, b in rep["_benches"].items():
        files.append(write_trials_csv(b, out / f"trials_{m}.csv"))
    print(json.dumps({k: v for k, v in rep.items() if not k.startswith("_")}, indent=2,
                     default=_jsonable))
    return 0, files, {"seed": cfg.base_seed}


COMMANDS = {
    "validate": cmd_validate,
    "invariant-density": cmd_invariant_density,
    "check-finiteness": cmd_check_finiteness,
    "support-bounds": cmd_support_bounds,
    "simulate-reverse": cmd_simulate_reverse,
    "simulate-naive": cmd_simulate_naive,
    "pde-solve": cmd_pde_solve,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perpetuity", description="Perpetuity law estimation by diffusion reversal")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_, model=True):
        sp = sub.add_parser(name, help=help_)
        if model:
            sp.add_argument("--model", required=True, help="model JSON file")
        sp.add_argument("--out-dir", default=".", help="directory for outputs and manifest")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        return sp

    sp = add("validate", "probe model coefficients")
    sp.add_argument("--probe-points", help="JSON list of states")

    sp = add("invariant-density", "tabulate the invariant density")
    sp.add_argument("--out")

    sp = add("check-finiteness", "decide almost-sure finiteness and the decay rate")
    sp.add_argument("--density")
    sp.add_argument("--epsilons", type=float, nargs="+")
    sp.add_argument("--out")

    sp = add("support-bounds", "support of the perpetuity when the discount is noiseless")
    sp.add_argument("--box", type=float, nargs="+", help="lower bounds then upper bounds")
    sp.add_argument("--density")
    sp.add_argument("--out")

    sp = add("simulate-reverse", "one reversal path and its occupation measure")
    sp.add_argument("--method", choices=["a", "b"], type=str.lower, default="a")
    sp.add_argument("--x", type=float, default=1.0)
    sp.add_argument("--T", type=float, default=10_000.0)
    sp.add_argument("--delta", type=float, default=1 / 24)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--stream-id", type=int, default=0)
    sp.add_argument("--z0", type=float, nargs="+", help="Method B start state")
    sp.add_argument("--density")
    sp.add_argument("--bins", type=int, default=40)
    sp.add_argument("--dump-paths", action="store_true")

    sp = add("simulate-naive", "iid forward paths with a truncated horizon")
    sp.add_argument("--paths", type=int, required=True)
    sp.add_argument("--trunc-T", type=float)
    sp.add_argument("--delta", type=float, default=1 / 24)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--density")
    sp.add_argument("--bins", type=int, default=40)

    sp = add("pde-solve", "finite-difference conditional CDF")
    sp.add_argument("--grid", required=True, help="grid JSON file")
    sp.add_argument("--scheme", choices=["upwind", "hybrid"], default="upwind")
    sp.add_argument("--out")

    sp = add("bench", "reversal versus naive benchmark", model=False)
    sp.add_argument("--config", help="bench JSON file")
    sp.add_argument("--methods", nargs="+", choices=["A", "B", "a", "b"])
    sp.add_argument("--no-naive", action="store_true")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "subcommand": args.command,
                "version": __version__, "argv": argv, "start": _now(),
                "config": {k: getattr(args, k) for k in ("model", "density", "grid", "config")
                           if getattr(args, k, None)},
                "seed": getattr(args, "seed", None), "outputs": []}
    code = 1
    try:
        code, files, extra = COMMANDS[args.command](args, out)
        manifest.update(extra)
        manifest["outputs"] = [str(f) for f in files]
    except (PerpetuityError, ValueError, OSError, KeyError) as exc:
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    finally:
        manifest["end"] = _now()
        manifest["exit_code"] = code
        _write_json(out / "manifest.json", manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
