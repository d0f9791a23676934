"""Command-line entry points: train, oracle, verify, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .equilibrium import (
    certificate_to_json,
    enumerate_pure_high_candidates,
    verify_nash,
    verify_stackelberg,
)
from .harness import (
    BATTERIES,
    _build_environment,
    load_experiment_config,
    report_directory,
    run_experiment,
)
from .qlearning import QTablePair


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, output_dir=args.out)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, training=replace(config.training, seed=args.seed))
    result = run_experiment(config)
    print(f"wrote {result.output_dir}/summary.json")
    for phase in result.summary["phases"]:
        print(json.dumps(phase))
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    from .oracle import solve_coupled

    config = load_experiment_config(args.config)
    _, problem, _ = _build_environment(config)
    if problem is None:
        print("oracle requires a feudal agent config", file=sys.stderr)
        return 2
    solution = solve_coupled(problem, tol=args.tol)
    pair = QTablePair(high=solution.q_high, low=solution.q_low)
    nash = verify_nash(pair, problem, tol=max(args.tol * 100, 1e-8))
    report = {
        "residual_high": solution.residual_high,
        "residual_low": solution.residual_low,
        "sweeps": solution.sweeps,
        "nash": json.loads(certificate_to_json(nash)),
        "q_high": solution.q_high.tolist(),
        "q_low": solution.q_low.tolist(),
    }
    n_pure = problem.num_goals**problem.flat.num_states
    if n_pure <= args.max_policies:
        candidates = enumerate_pure_high_candidates(problem, tol=args.tol)
        stackelberg = verify_stackelberg(pair, problem, candidates, tol=max(args.tol * 100, 1e-8))
        report["stackelberg"] = json.loads(certificate_to_json(stackelberg))
    else:
        report["stackelberg"] = f"skipped: {n_pure} pure policies exceed cap {args.max_policies}"
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    battery = BATTERIES[args.suite]
    result = battery()
    text = json.dumps(result, indent=2, default=lambda v: np.asarray(v).tolist())
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    print(f"suite {args.suite}: {'ok' if result['ok'] else 'FAILED'}")
    return 0 if result["ok"] else 1


def _cmd_report(args: argparse.Namespace) -> int:
    report_directory(args.dir)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="feudalq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=_cmd_train)

    p_oracle = sub.add_parser(
        "oracle", help="solve the coupled system exactly and certify equilibria"
    )
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--tol", type=float, default=1e-9)
    p_oracle.add_argument("--max-policies", type=int, default=10**6)
    p_oracle.add_argument("--out", default=None)
    p_oracle.set_defaults(func=_cmd_oracle)

    p_verify = sub.add_parser("verify", help="run a numerical property battery")
    p_verify.add_argument("--suite", required=True, choices=sorted(BATTERIES))
    p_verify.add_argument("--out", default=None)
    p_verify.set_defaults(func=_cmd_verify)

    p_report = sub.add_parser("report", help="summarize an output directory")
    p_report.add_argument("--dir", required=True)
    p_report.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
