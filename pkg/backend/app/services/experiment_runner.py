import json
import logging
import os
import platform
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import psutil
import pydantic
import scipy

from .. import __version__
from ..core.config import settings
from ..core.exceptions import PromotionError, RunDirectoryError
from ..models.schemas import ComparisonReport, ExperimentPlan, PromotionPlan
from ..utils.hashing import sha256_file
from .analysis import analyze_store
from .metrics_store import MetricsStore
from .orchestrator import ExperimentOrchestrator, RunOutcome
from .plan_loader import parse_plan_text, plan_to_json, validate_plan_data
from .report_writer import read_report, write_report
from .result_store import ResultStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ENVIRONMENT = 1
EXIT_VALIDATION = 2
EXIT_VARIANT_FAILED = 3
EXIT_NO_WINNER = 4


class NoWinnerError(PromotionError):
    pass


class RunLock:
    """Exclusive lock file in the output directory; one experiment per directory at a time"""

    def __init__(self, directory: str):
        self.directory = directory
        self.path = os.path.join(directory, settings.LOCK_FILE_NAME)
        self._fd: Optional[int] = None

    def __enter__(self) -> "RunLock":
        os.makedirs(self.directory, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirectoryError("output directory is locked by another run", self.path)
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass
        return False


@dataclass
class RunArtifacts:
    run_dir: str
    outcome: RunOutcome
    manifest: Dict[str, Any]

    @property
    def exit_code(self) -> int:
        return EXIT_VARIANT_FAILED if self.outcome.failed else EXIT_OK


def _write_json(path: str, data: Any):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise RunDirectoryError("missing file", path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise RunDirectoryError(f"unreadable file ({e})", path)


def host_info() -> Dict[str, Any]:
    try:
        return {
            "platform": platform.system(),
            "python_version": platform.python_version(),
            "cpu_count": psutil.cpu_count(),
            "cpu_count_logical": psutil.cpu_count(logical=True),
            "memory_total": psutil.virtual_memory().total,
        }
    except Exception as e:
        logger.error(f"Error collecting host info: {e}")
        return {"platform": platform.system(), "python_version": platform.python_version()}


class ExperimentRunner:
    """
    Run-directory workflow shared by the command line and the HTTP API:
    run a plan, re-analyze exports, plan or execute promotion.
    """

    def __init__(self, output_root: Optional[str] = None):
        self.output_root = output_root or settings.OUTPUT_ROOT

    def run_dir_for(self, plan: ExperimentPlan, out_dir: Optional[str] = None) -> str:
        return out_dir or os.path.join(self.output_root, plan.experiment_id)

    def describe(self, plan: ExperimentPlan) -> Dict[str, Any]:
        orchestrator = ExperimentOrchestrator(plan.production, plan.cluster.worker_slots,
                                              experiment_id=plan.experiment_id)
        return orchestrator.describe_provisioning(plan)

    # ------------------------------------------------------------------
    # run
    # ------------------------------------------------------------------

    def run(self, plan: ExperimentPlan, out_dir: Optional[str] = None, plan_text: Optional[str] = None) -> RunArtifacts:
        run_dir = self.run_dir_for(plan, out_dir)
        with RunLock(run_dir):
            started_at = datetime.now().isoformat()
            _write_plan_files(run_dir, plan, plan_text)

            orchestrator = ExperimentOrchestrator(plan.production, plan.cluster.worker_slots,
                                                  experiment_id=plan.experiment_id)
            handles = orchestrator.provision(plan)
            logger.info(f"Running {plan.experiment_id}: {plan.rounds} rounds x {plan.round_duration_s} s, "
                        f"scale {plan.scale_factor}, seed {plan.seed}")
            outcome = orchestrator.run(plan, handles)
            # teardown moves failed handles to DECOMMISSIONED
            failed = set(outcome.failed)
            orchestrator.teardown(handles, out_dir=run_dir)
            write_report(outcome.report, outcome.series, os.path.join(run_dir, "report"), charts=plan.analysis.charts)

            manifest = {
                "experiment_id": plan.experiment_id,
                "plan_sha256": sha256_file(os.path.join(run_dir, "plan.json")),
                "seed": plan.seed,
                "scale_factor": plan.scale_factor,
                "versions": {
                    "flowtrial": __version__,
                    "python": platform.python_version(),
                    "numpy": np.__version__,
                    "scipy": scipy.__version__,
                    "pydantic": pydantic.VERSION,
                },
                "host": host_info(),
                "started_at": started_at,
                "finished_at": datetime.now().isoformat(),
                "pipelines": {
                    h.pipeline_id: {"role": h.role.value, "rounds_completed": h.rounds_completed,
                                    "failed": h.pipeline_id in failed, "failure": h.failure}
                    for h in handles
                },
                "failed_variants": outcome.failed,
                "rounds": [
                    {
                        "round": r.round,
                        "seed": r.seed,
                        "trace_digest": r.trace_digest,
                        "records_published": r.records_published,
                        "input_hashes": r.input_hashes,
                        "inputs_identical": r.inputs_identical,
                        "injections": [
                            {"pipeline_id": i.pipeline_id, "index": i.index, "kind": i.kind,
                             "worker": i.worker, "at_ms": i.at_ms, "status": i.status}
                            for i in r.injections
                        ],
                    }
                    for r in outcome.rounds
                ],
            }
            manifest["checksums"] = checksums(run_dir)
            _write_json(os.path.join(run_dir, "manifest.json"), manifest)
        logger.info(f"Run {plan.experiment_id} written to {run_dir}, winner {outcome.report.winner}")
        return RunArtifacts(run_dir=run_dir, outcome=outcome, manifest=manifest)

    # ------------------------------------------------------------------
    # analyze / report
    # ------------------------------------------------------------------

    def load_run(self, run_dir: str) -> Tuple[ExperimentPlan, Dict[str, Any]]:
        plan_data = _read_json(os.path.join(run_dir, "plan.json"))
        manifest = _read_json(os.path.join(run_dir, "manifest.json"))
        return validate_plan_data(plan_data), manifest

    def analyze(self, run_dir: str, write: bool = True, charts: Optional[bool] = None) -> ComparisonReport:
        """Recompute the comparison from the exported metric CSVs alone"""
        plan, manifest = self.load_run(run_dir)
        store = MetricsStore()
        pipelines = manifest.get("pipelines", {})
        for pipeline_id in sorted(pipelines):
            path = os.path.join(run_dir, "metrics", f"{pipeline_id}.csv")
            if not os.path.exists(path):
                raise RunDirectoryError("missing metrics export", path)
            try:
                store.import_csv(path)
            except Exception as e:
                raise RunDirectoryError(f"corrupt metrics export ({e})", path)

        report, series = analyze_store(
            store,
            plan,
            roles={pid: info["role"] for pid, info in pipelines.items()},
            failed=manifest.get("failed_variants", []),
            rounds_completed={pid: info.get("rounds_completed", 0) for pid, info in pipelines.items()},
            baseline=settings.PRODUCTION_PIPELINE_ID if settings.PRODUCTION_PIPELINE_ID in pipelines else None,
        )
        if write:
            write_report(report, series, os.path.join(run_dir, "report"),
                         charts=plan.analysis.charts if charts is None else charts)
        return report

    def report(self, run_dir: str) -> ComparisonReport:
        path = os.path.join(run_dir, "report", "report.json")
        if not os.path.exists(path):
            raise RunDirectoryError("missing report", path)
        return read_report(path)

    # ------------------------------------------------------------------
    # promote
    # ------------------------------------------------------------------

    def _orchestrator_for(self, run_dir: str) -> Tuple[ExperimentOrchestrator, ComparisonReport]:
        plan, manifest = self.load_run(run_dir)
        report = self.report(run_dir)
        if not report.winner:
            raise NoWinnerError(f"report of {plan.experiment_id} names no winner")

        stores = {}
        for pipeline_id in manifest.get("pipelines", {}):
            path = os.path.join(run_dir, "stores", f"{pipeline_id}.csv")
            if not os.path.exists(path):
                raise RunDirectoryError("missing store dump", path)
            stores[pipeline_id] = ResultStore.load(pipeline_id, path)

        orchestrator = ExperimentOrchestrator(plan.production, plan.cluster.worker_slots,
                                              experiment_id=plan.experiment_id)
        production = orchestrator.production
        production.store.extend(stores.get(production.pipeline_id, ResultStore(production.pipeline_id)).records())
        configs = plan.variant_configs()
        for pipeline_id, store in sorted(stores.items()):
            if pipeline_id == production.pipeline_id:
                continue
            orchestrator.add_pipeline(pipeline_id, configs.get(pipeline_id, plan.production), store=store)
        return orchestrator, report

    def plan_promotion(self, run_dir: str) -> PromotionPlan:
        orchestrator, report = self._orchestrator_for(run_dir)
        return orchestrator.plan_promotion(report.winner)

    def promote(self, run_dir: str, execute: bool = False) -> Tuple[PromotionPlan, Optional[Dict[str, Any]]]:
        state_path = os.path.join(run_dir, "promotion", "state.json")
        if execute and os.path.exists(state_path):
            state = _read_json(state_path)
            logger.info(f"{run_dir} already promoted to {state.get('production')}, nothing to do")
            plan = PromotionPlan.model_validate(_read_json(os.path.join(run_dir, "promotion", "plan.json")))
            return plan, state

        orchestrator, report = self._orchestrator_for(run_dir)
        plan = orchestrator.plan_promotion(report.winner)
        _write_json(os.path.join(run_dir, "promotion", "plan.json"), plan.model_dump(mode="json"))
        if not execute:
            return plan, None

        state = orchestrator.execute_promotion(plan)
        winner = orchestrator.handles[plan.winner]
        winner.store.dump(os.path.join(run_dir, "promotion", "stores", f"{plan.winner}.csv"))
        _write_json(state_path, state)
        return plan, state


def _write_plan_files(run_dir: str, plan: ExperimentPlan, plan_text: Optional[str]):
    with open(os.path.join(run_dir, "plan.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(plan_to_json(plan))
    if plan_text is not None:
        with open(os.path.join(run_dir, "plan.yaml"), "w", encoding="utf-8", newline="\n") as f:
            f.write(plan_text)


def checksums(run_dir: str) -> Dict[str, str]:
    """sha256 of every artifact except the manifest itself and the lock file"""
    found = {}
    for root, _, files in os.walk(run_dir):
        for name in files:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir).replace(os.sep, "/")
            if rel in ("manifest.json", settings.LOCK_FILE_NAME) or rel.startswith("promotion/"):
                continue
            found[rel] = sha256_file(path)
    return dict(sorted(found.items()))


def verify_checksums(run_dir: str) -> List[str]:
    """Relative paths whose content no longer matches the manifest"""
    manifest = _read_json(os.path.join(run_dir, "manifest.json"))
    mismatched = []
    for rel, digest in manifest.get("checksums", {}).items():
        path = os.path.join(run_dir, rel)
        if not os.path.exists(path) or sha256_file(path) != digest:
            mismatched.append(rel)
    return mismatched


def run_plan_text(text: str, runner: ExperimentRunner, out_dir: Optional[str] = None,
                  overrides: Optional[Dict[str, Any]] = None) -> RunArtifacts:
    plan = parse_plan_text(text, overrides)
    return runner.run(plan, out_dir=out_dir, plan_text=text)
