"""Command-line interface.

Subcommands:

* ``analyze``  -- fit the multistate model to a subjects CSV and write
  counterfactual curves, effect estimates with bootstrap intervals, fitted
  coefficients, baselines and (for the frailty variant) the EM trace;
* ``simulate`` -- run the bias/SD replication study against the built-in
  data-generating process and write a report table;
* ``oracle``   -- evaluate the true effect values of the built-in process
  by numerical integration (no simulation noise).

Exit codes: 0 success, 1 I/O failure, 2 input schema violation,
3 estimator non-convergence, 4 invalid configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .bootstrap import BootstrapConfig, BootstrapError, bootstrap_effects
from .cif import (CifCurve, DRAW_MODES, build_fit_grid, curves_frame,
                  effect_curves)
from .cox import ConvergenceError, fit_multistate
from .data import SchemaError, read_subjects_csv
from .frailty import FrailtySpec, fit_frailty
from .simulate import (DEFAULT_TIME_POINTS, DgpSpec, replication_study,
                       true_effect_table)

EXIT_OK = 0
EXIT_IO = 1
EXIT_SCHEMA = 2
EXIT_CONVERGENCE = 3
EXIT_CONFIG = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scrmediate",
        description="Randomized interventional direct and indirect effects "
                    "for semicompeting risks with a time-varying confounder.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="fit a subjects CSV and export results")
    a.add_argument("--input", required=True, help="subjects CSV path")
    a.add_argument("--covariates", default=None,
                   help="comma-separated covariate column names "
                        "(default: all non-schema columns)")
    a.add_argument("--variant", choices=["npmle", "frailty"], default="npmle")
    a.add_argument("--draw", choices=list(DRAW_MODES) + ["all"],
                   default="all")
    a.add_argument("--resamples", type=int, default=300,
                   help="bootstrap resamples (0 disables intervals)")
    a.add_argument("--nodes", type=int, default=20,
                   help="Gauss-Hermite nodes for the frailty variant")
    a.add_argument("--grid", type=int, default=0,
                   help="0 = evaluate on the pooled event grid; otherwise "
                        "a uniform grid of this many points")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("simulate", help="replication study of the estimators")
    s.add_argument("--setting", type=int, choices=[1, 2], default=1)
    s.add_argument("--replications", type=int, default=200)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--variant",
                   choices=["unconfoundedness", "frailty"], default=None,
                   help="default: unconfoundedness for setting 1, "
                        "frailty for setting 2")
    s.add_argument("--nodes", type=int, default=20)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)

    o = sub.add_parser("oracle", help="true effect values by integration")
    o.add_argument("--setting", type=int, choices=[1, 2], default=1)
    o.add_argument("--grid", type=int, default=2000)
    o.add_argument("--times", default=None,
                   help="comma-separated evaluation times "
                        "(default 2,4,6,8,10)")
    o.add_argument("--out", required=True)
    return p


def _manifest(out_dir: Path, args: argparse.Namespace, extra=None):
    config = {k: v for k, v in sorted(vars(args).items())}
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()
    payload = {
        "config": config,
        "config_hash": digest,
        "seed": getattr(args, "seed", None),
        "versions": {
            "scrmediate": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
        },
    }
    if extra:
        payload.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2,
                                                      default=str) + "\n")


def _cmd_analyze(args) -> int:
    covariates = (args.covariates.split(",") if args.covariates else None)
    if args.resamples < 0 or args.nodes < 1 or args.grid < 0:
        print("invalid configuration: resamples/nodes/grid out of range",
              file=sys.stderr)
        return EXIT_CONFIG
    ds = read_subjects_csv(args.input, covariates=covariates)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    fit = fit_multistate(ds)
    frailty_spec = None
    nodes = None
    if args.variant == "frailty":
        frailty_spec = FrailtySpec(node_count=args.nodes)
        fit = fit_frailty(ds, frailty_spec, init=fit)
        nodes = args.nodes

    # curves are always computed on the union of baseline jump times; a
    # requested uniform grid only changes where they are evaluated/exported
    curves = effect_curves(fit, ds, frailty_nodes=nodes)
    fit_grid = build_fit_grid(fit)
    if args.grid:
        grid = np.linspace(fit_grid[-1] / args.grid, fit_grid[-1], args.grid)
        curves = {
            k: CifCurve(times=grid, values=c.at(grid), z1=c.z1, z2=c.z2,
                        draw_mode=c.draw_mode,
                        frailty_averaged=c.frailty_averaged)
            for k, c in curves.items()}
    else:
        grid = fit_grid
    keep = {"natural": ["C00", "C11"],
            "conditional": ["C00", "C11", "C01"],
            "marginal": ["M00", "M11", "M01"],
            "all": list(curves)}[args.draw]
    curves_frame({k: curves[k] for k in keep}).to_csv(
        out_dir / "curves.csv", index=False)

    if args.resamples:
        table = bootstrap_effects(
            ds, grid, variant=args.variant,
            config=BootstrapConfig(resamples=args.resamples, seed=args.seed),
            frailty_spec=frailty_spec, workers=args.workers)
    else:
        from .cif import effect_table
        table = effect_table(fit, ds, grid, frailty_nodes=nodes)
    table.to_frame().to_csv(out_dir / "effects.csv", index=False)

    fit.summary_frame().to_csv(out_dir / "fit_summary.csv", index=False)
    baselines = pd.concat(
        [fit[(arm, kind)].baseline_frame().assign(arm=arm, transition=kind)
         for arm in (0, 1) for kind in ("confounder", "intermediate",
                                        "terminal")],
        ignore_index=True)
    baselines.to_csv(out_dir / "baselines.csv", index=False)
    if fit.em_trace is not None:
        fit.em_trace.to_csv(out_dir / "em_trace.csv", index=False)

    _manifest(out_dir, args, extra={"n_subjects": ds.n,
                                    "arm_counts": list(ds.arm_counts())})
    print(f"analyze: wrote results for {ds.n} subjects to {out_dir}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    if args.replications < 1 or args.n < 2 or args.nodes < 1:
        print("invalid configuration: replications/n/nodes out of range",
              file=sys.stderr)
        return EXIT_CONFIG
    variant = args.variant or ("frailty" if args.setting == 2
                               else "unconfoundedness")
    spec = DgpSpec(n=args.n,
                   frailty_sd=0.4 if args.setting == 2 else 0.0,
                   seed=args.seed)
    report = replication_study(
        spec, args.replications, variant, seed=args.seed,
        frailty_spec=FrailtySpec(node_count=args.nodes))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(out_dir / "replication_report.csv", index=False)
    extra = {"n_failed": report.n_failed}
    if report.alpha_mean is not None:
        extra["alpha_mean"] = list(report.alpha_mean)
        if report.alpha_sd is not None:
            extra["alpha_sd"] = list(report.alpha_sd)
    _manifest(out_dir, args, extra=extra)
    print(f"simulate: {args.replications} replications "
          f"({report.n_failed} failed), report in {out_dir}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    if args.grid < 10:
        print("invalid configuration: grid too coarse", file=sys.stderr)
        return EXIT_CONFIG
    times = (tuple(float(t) for t in args.times.split(","))
             if args.times else DEFAULT_TIME_POINTS)
    spec = DgpSpec(frailty_sd=0.4 if args.setting == 2 else 0.0)
    table = true_effect_table(spec, times, n_grid=args.grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_frame().to_csv(out_dir / "true_effects.csv", index=False)
    _manifest(out_dir, args)
    print(f"oracle: true effect values written to {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"analyze": _cmd_analyze, "simulate": _cmd_simulate,
                "oracle": _cmd_oracle}
    try:
        return handlers[args.command](args)
    except SchemaError as e:
        for problem in e.problems:
            print(f"schema error: {problem}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConvergenceError, BootstrapError) as e:
        print(f"convergence failure: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
