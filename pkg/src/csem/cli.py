"""Command-line driver: ``csem fit`` and ``csem simulate``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .data import DataInput, load
from .dsl import parse
from .errors import CsemError, ModelLanguageError, UserError
from .estimator import EstimationSettings
from .popgen import population_from_program, sample
from .report import (
    SPECS,
    build_report,
    model_variables,
    program_for,
    resolve_spec,
    run_specifications,
    settings_from_program,
    to_json,
    to_text,
)

EXIT_OK, EXIT_USER, EXIT_NOT_CONVERGED = 0, 1, 2


def _read_text(path: str) -> str:
    if not os.path.exists(path):
        raise UserError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)


def _columns(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UserError(f"--column expects NAME=COLUMN, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_fit(args) -> int:
    program = parse(_read_text(args.model))
    if args.weights or args.transmit:
        tx = {"mimic": "mimic_two_step", "full": "full"}.get(args.transmit)
        program = program_for(program, weights=args.weights, transmission=tx)
    if (args.data is None) == (args.cov is None):
        raise UserError("give exactly one of --data or --cov")
    if args.cov is not None:
        if args.n is None:
            raise UserError("--cov needs --n")
        src = DataInput(args.cov, "cov", n=args.n, columns=_columns(args.column))
    else:
        standardize = args.standardize or bool(program.options.get("standardize", False))
        src = DataInput(args.data, "csv", standardize=standardize,
                        missing_policy=args.missing, columns=_columns(args.column))
    loaded = load(src, model_variables(program))

    settings = settings_from_program(program, seed=args.seed)
    if args.divisor:
        settings = EstimationSettings(**{**settings.__dict__, "divisor_convention": args.divisor})
    if args.spec == "all":
        specs, skip = list(SPECS), True
    elif args.spec is None:
        specs, skip = [None], False
    else:
        specs, skip = [resolve_spec(args.spec)], False
    if specs == [None]:
        kinds = {b.spec for b in program.blocks}
        if len(kinds) != 1:
            raise UserError("blocks use different specifications; pass --spec")
        specs = [kinds.pop()]
    outcomes, skipped = run_specifications(program, loaded, specs, settings, skip)
    report = build_report(program, loaded, outcomes, skipped, settings, args.seed,
                          os.path.basename(args.model))
    _write(to_json(report) if args.format == "json" else to_text(report), args.out)
    return EXIT_NOT_CONVERGED if any(o.result is None for o in outcomes) else EXIT_OK


def cmd_simulate(args) -> int:
    program = parse(_read_text(args.model))
    spec = population_from_program(program)
    if args.n < 2:
        raise UserError("--n must be at least 2")
    frame = sample(spec, args.n, seed=args.seed)
    text = frame.to_csv(index=False, float_format="%.10g")
    _write(text, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csem", description="Composite specifications in structural equation models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log optimizer progress")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate a model")
    fit.add_argument("--model", required=True, help="model file (.csem)")
    fit.add_argument("--data", help="CSV with a header row; NA or empty cells are missing")
    fit.add_argument("--cov", help="covariance matrix CSV (use with --n)")
    fit.add_argument("--n", type=int, help="sample size for --cov")
    fit.add_argument("--spec", help="specification name, or 'all'",
                     choices=["all", *SPECS, "twostep", "onestep", "pseudo", "original",
                              "refined", "phantom", "blended"])
    fit.add_argument("--weights", choices=["sum", "average", "free"],
                     help="override every composite's weight mode")
    fit.add_argument("--transmit", choices=["full", "mimic"],
                     help="override every composite's transmission")
    fit.add_argument("--standardize", action="store_true", help="z-score the data first")
    fit.add_argument("--missing", choices=["listwise", "fail"], default="listwise")
    fit.add_argument("--divisor", choices=["n", "n_minus_1"])
    fit.add_argument("--column", action="append", metavar="NAME=COLUMN",
                     help="map a model variable to a differently named column")
    fit.add_argument("--format", choices=["text", "json"], default="text")
    fit.add_argument("--out", help="write the report here instead of stdout")
    fit.add_argument("--seed", type=int, default=0, help="seed for jittered restarts")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="draw data from the population in a model file")
    sim.add_argument("--model", required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--seed", type=int, help="overrides pop.seed")
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ModelLanguageError as exc:
        for d in exc.diagnostics:
            print(f"{args.model}:{d}", file=sys.stderr)
        return EXIT_USER
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except CsemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
