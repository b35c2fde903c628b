"""``fedsim`` command line: ``run``, ``compare`` and ``gen-data``.

Exit codes: 0 success, 2 config / input error, 3 runtime protocol error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import DomainShiftSpec, ParseError, StratificationError
from .harness import ConfigError, compare, gen_data, load_config, run_experiment
from .protocol import ProtocolError

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="override master_seed")
    run.add_argument("--out", help="override output_dir")
    run.add_argument("--workers", type=int, help="threads for concurrent client updates")
    run.add_argument("--strict-star-aggregation", action="store_true",
                     help="Fed-Star server step keeps the extra 1/K factor")
    run.add_argument("--relay-via-server", action="store_true",
                     help="Fed-Cyclic handoffs go through the server")

    cmp_ = sub.add_parser("compare", help="tabulate summary.json files")
    cmp_.add_argument("summaries", nargs="+")

    gen = sub.add_parser("gen-data", help="write a synthetic federation to feature files")
    gen.add_argument("--clients", type=int, default=8)
    gen.add_argument("--classes", type=int, default=31)
    gen.add_argument("--feature-dim", type=int, default=32)
    gen.add_argument("--samples", type=int, default=200, help="samples per client")
    gen.add_argument("--shift-scale", type=float, default=0.0)
    gen.add_argument("--label-skew", type=float, default=0.0)
    gen.add_argument("--noise-scale", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
        cfg.runs = [replace(r, master_seed=args.seed) for r in cfg.runs]
    if args.out:
        cfg.output_dir = Path(args.out)
    if args.strict_star_aggregation or args.relay_via_server:
        cfg.runs = [replace(r, strict_star_aggregation=r.strict_star_aggregation or args.strict_star_aggregation,
                            relay_via_server=r.relay_via_server or args.relay_via_server)
                    for r in cfg.runs]
    summaries = run_experiment(cfg, workers=args.workers)
    print(compare(summaries))
    return 0


def _cmd_gen_data(args) -> int:
    spec = DomainShiftSpec(
        num_clients=args.clients, num_classes=args.classes, feature_dim=args.feature_dim,
        samples_per_client=args.samples, shift_scale=args.shift_scale, label_skew=args.label_skew,
        seed=args.seed, noise_scale=args.noise_scale,
    )
    path = gen_data(spec, args.out)
    print(path)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            print(compare(args.summaries))
            return 0
        return _cmd_gen_data(args)
    except (ConfigError, ParseError, StratificationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
