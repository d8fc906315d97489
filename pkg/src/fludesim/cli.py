"""Command-line entry point: ``fludesim {run,compare,resume,validate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from fludesim.metrics import (
    comparison_table,
    run_matrix,
    write_comparison_csv,
    write_run_outputs,
    write_summary_csv,
)
from fludesim.round_engine import InfeasibleBudget, RoundError, Simulation
from fludesim.scenario import ABLATION_VARIANTS, VARIANTS, ScenarioError, load_scenario

log = logging.getLogger("fludesim")


def _load(args):
    scenario = load_scenario(args.scenario)
    if getattr(args, "variant", None):
        scenario = scenario.with_variant(args.variant)
    if getattr(args, "rounds", None) is not None:
        scenario = replace(scenario, rounds=args.rounds)
    return scenario


def cmd_validate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(scenario.to_json())
    return 0


def cmd_run(args) -> int:
    scenario = _load(args)
    out = Path(args.out)
    sim = Simulation(scenario, out_dir=out)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    result = sim.run(scenario.rounds, checkpoint_path=checkpoint)
    summary = write_run_outputs(out, scenario, result)
    if not args.quiet:
        print(f"{scenario.variant} seed={scenario.seed}: final_accuracy={summary.final_accuracy:.4f} "
              f"comm={summary.total_comm_units} rounds={summary.rounds}")
    return 0


def cmd_resume(args) -> int:
    if not args.checkpoint:
        print("error: resume needs --checkpoint", file=sys.stderr)
        return 2
    sim, total = Simulation.from_checkpoint(args.checkpoint, out_dir=args.out)
    if args.rounds is not None:
        total = args.rounds
    result = sim.run(total, checkpoint_path=args.checkpoint)
    if sim.out_dir is not None:
        summary = write_run_outputs(sim.out_dir, sim.scenario, result)
        if not args.quiet:
            print(f"resumed to round {result.completed_rounds}: final_accuracy={summary.final_accuracy:.4f}")
    return 0


def cmd_compare(args) -> int:
    scenario = _load(args)
    variants = (args.variant,) if args.variant else ABLATION_VARIANTS
    seeds = [scenario.seed + k for k in range(args.seeds)]
    results = run_matrix(scenario, seeds, variants)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = [s for s, _ in results]
    write_summary_csv(out / "summaries.csv", summaries)
    table = comparison_table(summaries)
    write_comparison_csv(out / "comparison.csv", table)
    if not args.quiet:
        for row in table:
            print(f"{row['variant']:>20}  acc={row['mean_final_accuracy']:.4f}  "
                  f"comm={row['mean_total_comm_units']:.1f}  tta={row['mean_time_to_accuracy_s']:.1f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fludesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required, help="scenario JSON file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("run", help="run one scenario")
    common(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--rounds", type=int)
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.bin)")
    p.set_defaults(func=cmd_run, needs_out=True)

    p = sub.add_parser("compare", help="run the ablation variants across seeds")
    common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variant", choices=VARIANTS, help="restrict to one variant")
    p.add_argument("--rounds", type=int)
    p.set_defaults(func=cmd_compare, needs_out=True)

    p = sub.add_parser("resume", help="continue a run from its checkpoint")
    common(p, scenario_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rounds", type=int, help="override the total round count")
    p.set_defaults(func=cmd_resume, needs_out=False)

    p = sub.add_parser("validate", help="check a scenario file")
    common(p)
    p.set_defaults(func=cmd_validate, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.needs_out and not args.out:
        parser.error(f"{args.command} needs --out")
    try:
        return args.func(args)
    except ScenarioError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, InfeasibleBudget, RoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
