import json
import logging
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from ..core.exceptions import PlanValidationError
from ..models.schemas import ExperimentPlan

logger = logging.getLogger(__name__)


def violations_of(error: ValidationError) -> List[str]:
    """One `path: message` line per schema violation"""
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item.get("loc", ())) or "(plan)"
        lines.append(f"{path}: {item.get('msg', 'invalid')}")
    return lines


def validate_plan_data(data: Any, overrides: Optional[Dict[str, Any]] = None) -> ExperimentPlan:
    if not isinstance(data, dict):
        raise PlanValidationError(["(plan): expected a mapping at the top level"])
    data = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    try:
        return ExperimentPlan.model_validate(data)
    except ValidationError as e:
        raise PlanValidationError(violations_of(e)) from e


def read_plan_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def parse_plan_text(text: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentPlan:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise PlanValidationError([f"(plan): not a valid YAML document ({e})"]) from e
    return validate_plan_data(data, overrides)


def load_plan(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentPlan:
    """Read a YAML (or JSON) plan file; OSError propagates for unreadable files"""
    plan = parse_plan_text(read_plan_text(path), overrides)
    logger.info(f"Loaded plan {plan.experiment_id} from {path} with {len(plan.variants)} variants")
    return plan


def plan_to_json(plan: ExperimentPlan) -> str:
    return json.dumps(plan.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
