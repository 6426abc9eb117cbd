"""Command-line entry point.

Exit codes: 0 every asserted check passed, 1 a check failed, 2 config error,
3 numerical failure.
"""

import argparse
import sys

from .exceptions import DensityError, FBSDELabError, MissingReports, NumericalFailure

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

SUBCOMMAND_STAGES = {
    "solve": ("field", "field_oracle"),
    "simulate": ("simulate",),
    "density": ("density",),
    "bounds": ("bounds_X", "bounds_Y", "bounds_Z", "tail"),
    "comonotone": ("comonotone",),
    "malliavin": ("malliavin",),
    "localtime": ("localtime",),
    "zvonkin": ("zvonkin",),
    "price": ("price",),
}


def build_parser():
    ap = argparse.ArgumentParser(prog="fbsdelab",
                                 description="Numerical laboratory for coupled quadratic FBSDEs.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(SUBCOMMAND_STAGES) + ["run"]:
        sp = sub.add_parser(name, help=f"run the {name} stage(s)" if name != "run"
                            else "run every check listed in the config")
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", default=None, help="output root (default: config 'out' or ./out)")
        sp.add_argument("--seed", type=int, default=None, help="override mc.seed")
        sp.add_argument("--threads", type=int, default=1, help="worker cap for Monte Carlo")
    rp = sub.add_parser("report", help="merge stage reports into summary.json")
    rp.add_argument("--out", required=True, help="experiment directory (out/<experiment>)")
    return ap


def _stages_for(command, pipe):
    if command == "run":
        return None
    wanted = SUBCOMMAND_STAGES[command]
    picked = [s for s in wanted if s in pipe.checks]
    if picked:
        return picked
    # default stage of the subcommand when the config lists none of them
    return {"solve": ["field"], "bounds": ["bounds_X", "bounds_Y"]}.get(command, list(wanted))


def execute(argv=None, stdout=sys.stdout, stderr=sys.stderr):
    """Run the CLI and return the exit code (no ``sys.exit``)."""
    from . import io
    from .experiments import Pipeline, summarize

    args = build_parser().parse_args(argv)
    stage = args.command
    pipe = None
    try:
        if args.command == "report":
            s = summarize(args.out)
            print(f"{s['experiment']}: {sum(c['pass'] for c in s['checks'])}/{len(s['checks'])} "
                  "checks pass", file=stdout)
            return EXIT_OK if s["all_pass"] else EXIT_CHECK
        cfg = io.load_config(args.config)
        pipe = Pipeline(cfg, out=args.out, seed=args.seed, threads=args.threads)
        if args.command == "run":
            reports = pipe.run()
            summarize(pipe.dir)
        else:
            reports = {}
            for stage in _stages_for(args.command, pipe):
                reports[stage] = pipe.run_stage(stage)
        ok = True
        for name, rep in reports.items():
            status = "PASS" if rep["pass"] else "FAIL"
            failed = [k for k, c in rep["checks"].items() if not c["pass"]]
            print(f"{status} {name}" + (f" ({', '.join(failed)})" if failed else ""), file=stdout)
            ok &= rep["pass"]
        return EXIT_OK if ok else EXIT_CHECK
    except FBSDELabError as exc:
        if pipe is not None and pipe.current_stage:
            stage = pipe.current_stage
        return _report_error(exc, stage, stderr)


def _report_error(exc, stage, stderr):
    if isinstance(exc, MissingReports):
        print(f"error: {exc}", file=stderr)
        return EXIT_CONFIG
    if isinstance(exc, (NumericalFailure, DensityError)):
        print(f"numerical failure [{stage}]: {type(exc).__name__}: {exc}", file=stderr)
        return EXIT_NUMERICAL
    # config problems, and models that cannot support the requested stage
    print(f"config error [{stage}]: {type(exc).__name__}: {exc}", file=stderr)
    return EXIT_CONFIG


def main(argv=None):
    sys.exit(execute(argv))


if __name__ == "__main__":
    main()
