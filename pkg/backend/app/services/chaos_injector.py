import logging
import random
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from ..core.config import settings
from ..core.exceptions import ScenarioError
from ..models.schemas import FailureEvent, FailureKind, FailureScenario
from .pipeline_engine import StreamPipeline

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArmedEvent:
    index: int
    event: FailureEvent
    pipeline_id: str
    worker: int
    # absolute simulated time
    at_ms: int


@dataclass
class InjectionRecord:
    index: int
    pipeline_id: str
    kind: str
    worker: int
    at_ms: int
    status: str
    round: int = 0


@dataclass
class ArmedSchedule:
    scenario: FailureScenario
    round: int
    events: Dict[str, List[ArmedEvent]] = field(default_factory=dict)

    @property
    def pipeline_ids(self) -> List[str]:
        return sorted(self.events)


class ChaosInjector:
    """
    Arms a failure scenario against a set of pipelines.

    Every selected pipeline receives the same events with the same resolved worker
    index, so variants are compared under identical failures.
    """

    def __init__(self, seed: int = 0, production_id: str = settings.PRODUCTION_PIPELINE_ID):
        self.seed = seed
        self.production_id = production_id
        self.records: List[InjectionRecord] = []
        self._lock = threading.Lock()

    def select(self, scenario: FailureScenario, pipelines: Sequence[StreamPipeline]) -> List[StreamPipeline]:
        selected = []
        for pipeline in pipelines:
            if pipeline.pipeline_id == self.production_id and not scenario.include_production:
                continue
            if scenario.apply_to != "all" and pipeline.pipeline_id not in scenario.apply_to:
                continue
            selected.append(pipeline)
        return selected

    def resolve_target(self, index: int, event: FailureEvent, worker_count: int,
                       busy_workers: Optional[int] = None) -> int:
        """Random targets are drawn among the workers that host slots (the first busy_workers)"""
        if event.target == "random":
            pool = worker_count if busy_workers is None else min(busy_workers, worker_count)
            return random.Random(f"{self.seed}:{index}").randrange(pool)
        if event.target >= worker_count:
            raise ScenarioError(f"event {index} targets worker {event.target}, only {worker_count} available")
        return event.target

    def schedule(
        self,
        scenario: FailureScenario,
        pipelines: Sequence[StreamPipeline],
        duration_ms: int,
        offset_ms: int = 0,
        round_no: int = 0,
    ) -> ArmedSchedule:
        """Arm every event on every selected pipeline; at_ms is relative to offset_ms"""
        for index, event in enumerate(scenario.events):
            if event.at_ms >= duration_ms:
                raise ScenarioError(f"event {index} at {event.at_ms} ms lies beyond the {duration_ms} ms round")

        armed = ArmedSchedule(scenario=scenario, round=round_no)
        selected = self.select(scenario, pipelines)
        if not selected or not scenario.events:
            return armed

        worker_count = min(p.config.worker_count for p in selected)
        busy_workers = min(min(p.config.worker_count, p.config.parallelism) for p in selected)
        workers = [self.resolve_target(i, e, worker_count, busy_workers) for i, e in enumerate(scenario.events)]
        for pipeline in selected:
            events = [
                ArmedEvent(i, e, pipeline.pipeline_id, workers[i], offset_ms + e.at_ms)
                for i, e in enumerate(scenario.events)
            ]
            pipeline.arm(events, self.fire)
            armed.events[pipeline.pipeline_id] = events
        logger.info(
            f"Armed scenario {scenario.name} ({len(scenario.events)} events) on "
            f"{', '.join(armed.pipeline_ids)} for round {round_no}"
        )
        return armed

    def fire(self, armed: ArmedEvent, pipeline: StreamPipeline) -> InjectionRecord:
        event = armed.event
        reason = None
        if not pipeline.slots_of_worker(armed.worker):
            reason = "hosts no slots"
        elif pipeline.is_worker_down(armed.worker, armed.at_ms):
            reason = "is down"
        skipped = reason is not None
        record = InjectionRecord(
            index=armed.index,
            pipeline_id=pipeline.pipeline_id,
            kind=event.kind.value,
            worker=armed.worker,
            at_ms=armed.at_ms,
            status="skipped" if skipped else "fired",
            round=pipeline.round,
        )
        with self._lock:
            self.records.append(record)
        pipeline.metrics.record(
            "annotation", 0.0 if skipped else 1.0, armed.at_ms,
            round=str(pipeline.round), event=str(armed.index), kind=event.kind.value,
            worker=str(armed.worker), status=record.status,
        )
        if skipped:
            logger.warning(
                f"[{pipeline.pipeline_id}] {event.kind.value} of worker {armed.worker} at {armed.at_ms} ms skipped, "
                f"worker {reason}"
            )
            return record

        if event.kind == FailureKind.WORKER_KILL:
            pipeline.fail_and_recover(armed.at_ms, armed.worker)
        elif event.kind == FailureKind.WORKER_SLOWDOWN:
            pipeline.slow_worker(armed.worker, event.slowdown_factor, armed.at_ms, event.duration_ms)
        elif event.kind == FailureKind.PAUSE_RESUME:
            pipeline.pause_worker(armed.worker, armed.at_ms, event.duration_ms)
        return record

    def records_for(self, pipeline_id: Optional[str] = None, round_no: Optional[int] = None) -> List[InjectionRecord]:
        with self._lock:
            found = [
                r for r in self.records
                if (pipeline_id is None or r.pipeline_id == pipeline_id)
                and (round_no is None or r.round == round_no)
            ]
        return sorted(found, key=lambda r: (r.round, r.pipeline_id, r.index))
