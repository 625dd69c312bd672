import logging
import os
from typing import Any, Dict

from fastapi import APIRouter, Body, Depends, HTTPException

from ...core.config import settings
from ...core.exceptions import FlowTrialError, PlanValidationError, RunDirectoryError
from ...services.experiment_runner import ExperimentRunner, NoWinnerError
from ...services.plan_loader import validate_plan_data

logger = logging.getLogger(__name__)

router = APIRouter()


def get_runner() -> ExperimentRunner:
    return ExperimentRunner(settings.OUTPUT_ROOT)


def _run_dir(runner: ExperimentRunner, experiment_id: str) -> str:
    if not experiment_id or "/" in experiment_id or experiment_id.startswith("."):
        raise HTTPException(status_code=400, detail="Invalid experiment id")
    run_dir = os.path.join(runner.output_root, experiment_id)
    if not os.path.isdir(run_dir):
        raise HTTPException(status_code=404, detail=f"No run named {experiment_id}")
    return run_dir


@router.post("/validate", response_model=Dict[str, Any])
async def validate_plan(plan: Dict[str, Any] = Body(...)):
    """Check a plan document against the schema without running it"""
    try:
        parsed = validate_plan_data(plan)
    except PlanValidationError as e:
        return {"valid": False, "violations": e.violations}
    return {
        "valid": True,
        "experiment_id": parsed.experiment_id,
        "variants": [v.name for v in parsed.variants],
        "rounds": parsed.rounds,
    }


@router.post("/run", response_model=Dict[str, Any])
def run_experiment(plan: Dict[str, Any] = Body(...), runner: ExperimentRunner = Depends(get_runner)):
    """Run a plan to completion and return its comparison report"""
    try:
        parsed = validate_plan_data(plan)
    except PlanValidationError as e:
        raise HTTPException(status_code=422, detail=e.violations)
    try:
        artifacts = runner.run(parsed)
    except RunDirectoryError as e:
        raise HTTPException(status_code=409, detail=str(e))
    except FlowTrialError as e:
        logger.error(f"Run of {parsed.experiment_id} failed: {e}")
        raise HTTPException(status_code=500, detail=str(e))
    return {
        "experiment_id": parsed.experiment_id,
        "run_dir": artifacts.run_dir,
        "exit_code": artifacts.exit_code,
        "failed_variants": artifacts.outcome.failed,
        "report": artifacts.outcome.report.model_dump(mode="json"),
    }


@router.get("/runs/{experiment_id}/report", response_model=Dict[str, Any])
async def get_report(experiment_id: str, runner: ExperimentRunner = Depends(get_runner)):
    run_dir = _run_dir(runner, experiment_id)
    try:
        return runner.report(run_dir).model_dump(mode="json")
    except RunDirectoryError as e:
        raise HTTPException(status_code=404, detail=str(e))


@router.get("/runs/{experiment_id}/promotion", response_model=Dict[str, Any])
def get_promotion_plan(experiment_id: str, runner: ExperimentRunner = Depends(get_runner)):
    """Dry-run promotion plan for the run's winner"""
    run_dir = _run_dir(runner, experiment_id)
    try:
        return runner.plan_promotion(run_dir).model_dump(mode="json")
    except NoWinnerError as e:
        raise HTTPException(status_code=409, detail=str(e))
    except RunDirectoryError as e:
        raise HTTPException(status_code=404, detail=str(e))
