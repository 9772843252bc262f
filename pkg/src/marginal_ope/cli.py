"""Command-line entry point: ``marginal-ope <command> ...``.

Exit codes: 0 on success, 2 on a config or input error, 3 when the share of
failed estimator runs in some cell exceeds the configured threshold.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .environments import make_environment
from .mdp import InvalidMdpError, load_mdp

EXIT_OK, EXIT_CONFIG, EXIT_ATTRITION = 0, 2, 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_params(items) -> dict:
    params = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise harness.ConfigError(f"parameter {item!r} is not of the form key=value")
        params[key] = _parse_value(value)
    return params


def cmd_run(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    doc = config.to_dict()
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    config = harness.ExperimentConfig.from_dict(doc)
    out_dir = Path(config.out or "results")
    records = harness.run_experiment(config, workers=args.workers)
    csv_path, json_path = harness.emit_results(records, out_dir, config.metric, config.to_dict())
    summary = json.loads(json_path.read_text())
    print(harness.cell_table(summary))
    print(f"wrote {csv_path} and {json_path}")
    worst = harness.max_attrition(summary)
    if worst > config.attrition_threshold:
        print(f"error: attrition {worst:.1%} exceeds threshold {config.attrition_threshold:.1%}",
              file=sys.stderr)
        return EXIT_ATTRITION
    return EXIT_OK


def cmd_list_envs(args) -> int:
    for name, doc in harness.describe_environments().items():
        print(f"{name:<20} {doc}")
    return EXIT_OK


def cmd_list_estimators(args) -> int:
    for name, entry in harness.ESTIMATORS.items():
        needs = " (finite actions)" if entry.needs_finite_actions else ""
        print(f"{name:<8} {entry.summary}{needs}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    params = _parse_params(args.params)
    if args.seed is not None and args.env == "mountain-car":
        params.setdefault("seed", args.seed)
    try:
        bundle = make_environment(args.env, **params)
    except KeyError as exc:
        raise harness.ConfigError(exc.args[0]) from None
    except TypeError as exc:
        raise harness.ConfigError(f"bad parameters for {args.env}: {exc}") from None
    print(json.dumps(bundle.oracle(), sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        mdp = load_mdp(args.mdp)
    except OSError as exc:
        raise harness.ConfigError(f"cannot read {args.mdp}: {exc.strerror}") from None
    except InvalidMdpError as exc:
        raise harness.ConfigError(f"{args.mdp}: {exc}") from None
    print(f"ok: S={mdp.num_states} A={mdp.num_actions} H={mdp.horizon}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--seed", type=int, default=None, help="override the base seed")
    common.add_argument("--out", default=None, help="output directory for results")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="marginal-ope", parents=[common],
                                     description="Off-policy evaluation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("list-envs", parents=[common], help="list environment ids")
    p.set_defaults(func=cmd_list_envs)
    p = sub.add_parser("list-estimators", parents=[common], help="list estimator ids")
    p.set_defaults(func=cmd_list_estimators)
    p = sub.add_parser("oracle", parents=[common], help="print the true value of an environment")
    p.add_argument("env")
    p.add_argument("params", nargs="*", help="key=value environment parameters")
    p.set_defaults(func=cmd_oracle)
    p = sub.add_parser("validate", parents=[common], help="check an MDP JSON document")
    p.add_argument("mdp")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
