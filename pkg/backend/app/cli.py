import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from .core.config import settings
from .core.exceptions import FlowTrialError, PlanValidationError, RunDirectoryError
from .services.experiment_runner import (
    EXIT_ENVIRONMENT,
    EXIT_NO_WINNER,
    EXIT_OK,
    EXIT_VALIDATION,
    ExperimentRunner,
    NoWinnerError,
)
from .services.plan_loader import load_plan, parse_plan_text, read_plan_text
from .services.workload_generator import generate_trace, trace_digest, write_trace

logger = logging.getLogger("flowtrial")


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {"seed": getattr(args, "seed", None), "scale_factor": getattr(args, "scale", None)}


def _print_violations(error: PlanValidationError):
    print("Plan is invalid:", file=sys.stderr)
    for line in error.violations:
        print(f"  {line}", file=sys.stderr)


def _load(args: argparse.Namespace):
    text = read_plan_text(args.plan)
    return text, parse_plan_text(text, _overrides(args))


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        plan = load_plan(args.plan, _overrides(args))
    except OSError as e:
        print(f"Cannot read plan {args.plan}: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except PlanValidationError as e:
        _print_violations(e)
        return EXIT_VALIDATION
    print(f"Plan {plan.experiment_id} is valid: {len(plan.variants)} variants, {plan.rounds} rounds")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    try:
        text, plan = _load(args)
    except OSError as e:
        print(f"Cannot read plan {args.plan}: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except PlanValidationError as e:
        _print_violations(e)
        return EXIT_VALIDATION

    runner = ExperimentRunner()
    if args.dry_run:
        print(json.dumps(runner.describe(plan), indent=2))
        return EXIT_OK
    try:
        artifacts = runner.run(plan, out_dir=args.out, plan_text=text)
    except (OSError, RunDirectoryError) as e:
        print(f"Run failed: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except FlowTrialError as e:
        logger.error(f"Run of {plan.experiment_id} aborted: {e}")
        print(f"Run failed: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT

    report = artifacts.outcome.report
    print(f"Run directory: {artifacts.run_dir}")
    print(f"Ranking: {', '.join(report.ranking) or '-'}")
    print(f"Winner: {report.winner or 'none'}")
    if artifacts.outcome.failed:
        print(f"Failed variants: {', '.join(artifacts.outcome.failed)}", file=sys.stderr)
    return artifacts.exit_code


def _run_dir(args: argparse.Namespace) -> Optional[str]:
    if not args.out:
        print("--out must name a run directory", file=sys.stderr)
        return None
    return args.out


def cmd_analyze(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    if run_dir is None:
        return EXIT_ENVIRONMENT
    try:
        report = ExperimentRunner().analyze(run_dir)
    except (OSError, FlowTrialError) as e:
        print(f"Analysis failed: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    print(f"Report written to {run_dir}/report, winner {report.winner or 'none'}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    if run_dir is None:
        return EXIT_ENVIRONMENT
    try:
        ExperimentRunner().analyze(run_dir, charts=args.charts or None)
        with open(f"{run_dir}/report/summary.md", "r", encoding="utf-8") as f:
            print(f.read(), end="")
    except (OSError, FlowTrialError) as e:
        print(f"Report failed: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    return EXIT_OK


def cmd_promote(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    if run_dir is None:
        return EXIT_ENVIRONMENT
    try:
        plan, state = ExperimentRunner().promote(run_dir, execute=args.execute)
    except NoWinnerError as e:
        print(f"Nothing to promote: {e}", file=sys.stderr)
        return EXIT_NO_WINNER
    except (OSError, FlowTrialError) as e:
        print(f"Promotion failed: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT

    print(f"Promotion of {plan.winner} over {plan.production}"
          f" (estimated migration: {plan.estimated_migration_records} records)")
    for step in plan.steps:
        detail = f" {step.resource} from {step.source}, {step.records} records" if step.kind == "migrate" else ""
        print(f"  {step.order}. {step.kind} {step.target}{detail}")
    if state is not None:
        print(f"Gateway now routes to {state['production']}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        plan = load_plan(args.plan, _overrides(args))
    except OSError as e:
        print(f"Cannot read plan {args.plan}: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except PlanValidationError as e:
        _print_violations(e)
        return EXIT_VALIDATION
    duration = args.duration or plan.round_duration_s
    model = plan.workload.load_model(plan.scale_factor)
    trace = generate_trace(model, duration, plan.seed, plan.workload, start_s=plan.round_start_s)
    try:
        if args.out:
            messages = list(trace)
            count = write_trace(messages, args.out)
            digest = trace_digest(messages)
        else:
            count, digest = 0, None
            for message in trace:
                print(message.to_line())
                count += 1
    except OSError as e:
        print(f"Cannot write trace: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    if digest is not None:
        print(f"{count} messages, sha256 {digest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowtrial",
        description="A/B test stream-processing pipeline configurations against a simulated IoT workload",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def plan_args(p: argparse.ArgumentParser):
        p.add_argument("--plan", required=True, help="Experiment plan (YAML)")
        p.add_argument("--seed", type=int, default=None, help="Override the plan seed")
        p.add_argument("--scale", type=float, default=None, help="Override the plan scale_factor")

    p = sub.add_parser("validate", help="Check a plan against the schema")
    plan_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="Run a full experiment")
    plan_args(p)
    p.add_argument("--out", default=None, help=f"Run directory (default: {settings.OUTPUT_ROOT}/<experiment_id>)")
    p.add_argument("--dry-run", action="store_true", help="Print the provisioning plan and stop")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="Recompute the report from a run directory's metric exports")
    p.add_argument("--out", required=True, help="Run directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="Re-emit report files and print the summary")
    p.add_argument("--out", required=True, help="Run directory")
    p.add_argument("--charts", action="store_true", help="Also render SVG charts")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("promote", help="Plan or execute promotion of the winning variant")
    p.add_argument("--out", required=True, help="Run directory")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--execute", action="store_true", help="Perform migration, switch and decommission")
    mode.add_argument("--dry-run", action="store_true", help="Only print the promotion plan (default)")
    p.set_defaults(func=cmd_promote)

    p = sub.add_parser("generate", help="Write the workload trace of a plan")
    plan_args(p)
    p.add_argument("--duration", type=int, default=None, help="Simulated seconds (default: round duration)")
    p.add_argument("--out", default=None, help="Trace file (default: stdout)")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
