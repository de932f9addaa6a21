"""Command line entry point.

Subcommands::

    sapalm run      --config exp.yaml [--set key=value ...] [--out DIR] [--threads P] [--seed S] [--mode M]
    sapalm speedup  --config exp.yaml --threads 1,2,4 [--d 10,20] [--epochs 16] [--repeats 3] [--out DIR]
    sapalm verify   --suite NAME|all [--strict]
    sapalm gen-data --set n=2000 --out data.splm [--seed S]

Configuration keys (flat YAML mapping, any of which may be given with
``--set``): problem, n, d, lam, kappa, mu, layout, rho, data_seed,
data_file, save_data, mode, workers, selection, epochs, iterations,
time_budget, stride, seed, delay, lipschitz_refresh, a, regime, alpha,
tau, noise, sigma0, batch_base, out, wall_clock.

Schedule keys: ``a`` is the stepsize safety factor (> 1), ``regime`` one
of summable / alpha-diminishing / smooth-sqrt, ``alpha`` the decay
exponent in (0, 1), ``tau`` the delay bound, ``sigma0`` the noise scale
and ``batch_base`` the minibatch size at iteration 0.

Exit status is 0 on success, 2 on a configuration error and 1 on a
runtime error. The environment variable ``SAPALM_MAX_WORKERS`` caps the
number of async workers.
"""

import argparse
import logging
import sys

from . import __version__
from .config import load_config, parse_overrides
from .errors import ConfigError, SapalmError
from .harness import SUITES, run_experiment, speedup_table, verify_suite
from .problems import generate_data, save_data

log = logging.getLogger("sapalm")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="sapalm", description="Asynchronous block prox-gradient experiments.")
    parser.add_argument("--version", action="version", version=f"sapalm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads_help):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory (or file for gen-data)")
        p.add_argument("--seed", type=int, help="shortcut for --set seed=S")
        p.add_argument("--threads", type=str, help=threads_help)

    p = sub.add_parser("run", help="run one experiment and write trace.csv + metadata.yaml")
    common(p, "async worker count")
    p.add_argument("--mode", choices=["sync", "sim-async", "async"])

    p = sub.add_parser("speedup", help="time async runs for several worker counts")
    common(p, "comma-separated worker counts (default 1,2,4)")
    p.add_argument("--d", type=_int_list, help="comma-separated factor ranks (default: config d)")
    p.add_argument("--epochs", type=float, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--no-warmup", action="store_true")

    p = sub.add_parser("verify", help="run property suites and print pass/fail lines")
    p.add_argument("--suite", default="all", choices=["all", *SUITES])
    p.add_argument("--strict", action="store_true", help="exit 1 if any check fails")

    p = sub.add_parser("gen-data", help="write a data matrix file")
    common(p, argparse.SUPPRESS)
    return parser


def _config(args, extra=None):
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    overrides.update(extra or {})
    return load_config(args.config, overrides)


def _cmd_run(args):
    extra = {}
    if args.threads:
        try:
            extra["workers"] = int(args.threads)
        except ValueError:
            raise ConfigError(f"expected an integer, got {args.threads!r}", "--threads") from None
        extra.setdefault("mode", args.mode or "async")
    if args.out:
        extra["out"] = args.out
    cfg = _config(args, extra)
    art = run_experiment(cfg)
    s = art.trace.summary
    last = art.trace.records[-1]
    print(f"wrote {art.trace_path}")
    print(f"updates {s['total_updates']}  elapsed {s['elapsed_s']:.3f}s  objective {last.objective:.6g}  "
          f"stationarity {last.stationarity:.3g}  observed tau {s['max_delay']}")
    for w in art.trace.warnings:
        print(f"warning: {w}")
    return 0


def _cmd_speedup(args):
    threads = _int_list(args.threads) if args.threads else [1, 2, 4]
    extra = {"mode": "async", "workers": 1}
    cfg = _config(args, extra)
    out = args.out or cfg.out
    report = speedup_table(cfg, threads, ds=args.d, epochs=args.epochs, repeats=args.repeats,
                           warmup=not args.no_warmup, out=out)
    print(report.to_text(), end="")
    return 0


def _cmd_verify(args):
    names = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        for res in verify_suite(name):
            print(res.line())
            failed += not res.passed
    print(f"{failed} check(s) failed" if failed else "all checks passed")
    return 1 if (failed and args.strict) else 0


def _cmd_gen_data(args):
    cfg = _config(args)
    path = args.out or "data.splm"
    save_data(generate_data(cfg.n, cfg.data_seed), path)
    print(f"wrote {path} (n={cfg.n}, seed={cfg.data_seed})")
    return 0


COMMANDS = {"run": _cmd_run, "speedup": _cmd_speedup, "verify": _cmd_verify, "gen-data": _cmd_gen_data}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SapalmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
