"""Command-line entry point: ``smpc run`` and ``smpc list``."""
from __future__ import annotations

import argparse
import json
import sys

from . import chance, transform
from .bench.runners import run
from .bench.scenario import DEFAULTS, OPEN_DEFAULTS, PROBLEMS, Scenario, write_outputs
from .errors import ConfigurationError, ParameterError, SMPCError
from .reformulate import REPRESENTATIONS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

# command-line flag -> Scenario field
_FLAGS = {
    "repr": "representation",
    "method": "method",
    "approx": "approx",
    "seed": "seed",
    "rollouts": "rollouts",
    "out": "out",
    "mode": "mode",
    "chain_n": "chain_n",
    "gp_points": "gp_points",
    "noise_var": "noise_var",
    "duration": "duration",
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smpc", description="Stochastic MPC benchmarks")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one benchmark scenario")
    r.add_argument("problem", choices=PROBLEMS)
    r.add_argument("--repr", choices=REPRESENTATIONS)
    r.add_argument("--method", choices=transform.METHODS)
    r.add_argument("--approx", choices=chance.APPROXIMATIONS)
    r.add_argument("--seed", type=int)
    r.add_argument("--rollouts", type=int)
    r.add_argument("--out")
    r.add_argument("--mode", choices=("open", "closed"))
    r.add_argument("--chain-n", type=int)
    r.add_argument("--gp-points", type=int)
    r.add_argument("--noise-var", type=float)
    r.add_argument("--duration", type=float)
    r.add_argument("--config", help="JSON file with scenario fields; flags override it")
    sub.add_parser("list", help="list the available scenarios")
    return ap


def scenario_from_args(args) -> Scenario:
    d = {}
    if args.config:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        if d.get("problem", args.problem) != args.problem:
            raise ConfigurationError(f"config is for {d['problem']!r}, not {args.problem!r}")
    d["problem"] = args.problem
    for flag, name in _FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            d[name] = v
    return Scenario.from_dict(d).resolved()


def _list(out) -> None:
    for p in PROBLEMS:
        d = DEFAULTS[p]
        modes = "closed, open" if p in OPEN_DEFAULTS else "closed"
        print(f"{p}: dt={d['dt']:g} duration={d['duration']:g} T={d['T']:g} N={d['n_grid']} "
              f"approx={d['approx']} modes={modes}", file=out)
    print(f"representations: {', '.join(REPRESENTATIONS)}", file=out)
    print(f"methods: {', '.join(transform.METHODS)}", file=out)
    print(f"approximations: {', '.join(chance.APPROXIMATIONS)}", file=out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        _list(sys.stdout)
        return EXIT_OK
    try:
        s = scenario_from_args(args)
    except (ConfigurationError, ParameterError) as exc:
        print(f"smpc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        log = run(s)
    except (ConfigurationError, ParameterError) as exc:
        print(f"smpc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SMPCError as exc:
        print(f"smpc: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if s.out:
        write_outputs(log, s.out)
    print(json.dumps({k: v for k, v in log.stats.items() if k != "diagnostics"}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
