"""Command line entry point: figure data for the NMSE sweeps, runtime, support and convergence studies."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness as hs

FORMATS = ("csv", "json")


def _methods(text):
    if text is None:
        return None
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in hs.METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {','.join(hs.METHODS)}")
    return methods


def _common(p):
    p.add_argument("--trials", type=int, default=None, help="Monte Carlo trials (default from config)")
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.add_argument("--methods", type=_methods, default=None, help="comma separated subset of methods")
    p.add_argument("--full", action="store_true", help="paper-scale trial count")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="burst-otfs", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("sweep", help="NMSE versus SNR (2a), pilot length (2b) or array size (2c)")
    p.add_argument("--figure", choices=("2a", "2b", "2c"), required=True)
    _common(p)
    p = sub.add_parser("runtime", help="wall time versus delay grid size")
    p.add_argument("--repeats", type=int, default=3)
    _common(p)
    p = sub.add_parser("support", help="angular support recovery study")
    p.add_argument("--simulation", choices=("5", "6"), required=True)
    _common(p)
    p = sub.add_parser("convergence", help="per-iteration NMSE traces")
    _common(p)
    p = sub.add_parser("estimate", help="run a scenario described by a YAML config")
    p.add_argument("--config", required=True)
    _common(p)
    return ap


def _write(rows, args, extra=None):
    if args.format == "json" and extra is not None:
        text = hs.render_results(rows, "json")
        doc = json.loads(text)
        doc.update(hs._jsonable(extra))
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        text = hs.render_results(rows, args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _progress(args):
    if not args.verbose:
        return None
    return lambda sv, i: print(f"sweep value {sv}: trial {i + 1} done", file=sys.stderr, flush=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    dfl = hs.load_defaults()
    trials = args.trials or (dfl["full_trials"] if args.full else None)
    try:
        if args.command == "sweep":
            sc = hs.figure_scenario(args.figure, trials=trials, base_seed=args.seed, methods=args.methods,
                                    full=args.full)
            _write(hs.run_sweep(sc, progress=_progress(args)), args)
        elif args.command == "runtime":
            sc = hs.runtime_scenario(methods=args.methods, base_seed=args.seed)
            _write(hs.measure_runtime(sc, repeats=args.repeats), args)
        elif args.command == "support":
            rows, profiles = hs.support_recovery_report(args.simulation, trials=trials or 20, base_seed=args.seed)
            extra = {"profiles": {m: [{"theta_rad": th, "modulus": pr} for th, pr in v] for m, v in profiles.items()}}
            _write(rows, args, extra)
        elif args.command == "convergence":
            methods = args.methods or list(hs.ITERATIVE)
            rep = hs.convergence_report(trials=trials or 5, base_seed=args.seed,
                                        methods=[m for m in methods if m in hs.ITERATIVE])
            rows = []
            for (m, snr), r in rep.items():
                for it, v in enumerate(r["trace"], start=1):
                    rows.append(hs.ResultRow("convergence", m, snr, "nmse", v, trials or 5, it,
                                             {"settled_at": r["settled_at"]}))
            _write(rows, args, {"settled_at": {f"{m}@{snr}": r["settled_at"] for (m, snr), r in rep.items()}})
        elif args.command == "estimate":
            sc = hs.load_scenario(args.config)
            if trials:
                sc.trials = trials
            if args.seed is not None:
                sc.base_seed = args.seed
            if args.methods:
                sc.methods = tuple(args.methods)
            _write(hs.run_sweep(sc, progress=_progress(args)), args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
