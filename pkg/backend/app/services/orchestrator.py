import hashlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

from ..core.config import settings
from ..core.exceptions import (
    MigrationError,
    PipelineFatalError,
    PromotionError,
    ProvisioningError,
    ResourceBudgetExceededError,
)
from ..models.records import ResultIdentity, WindowResult
from ..models.schemas import ComparisonReport, ConfigSet, ExperimentPlan, PromotionPlan, PromotionStep
from .analysis import VariantSeries, analyze_store
from .chaos_injector import ChaosInjector, InjectionRecord
from .metrics_store import MetricsStore, MetricsView
from .pipeline_engine import PipelineSpec, StreamPipeline
from .result_store import ResultStore
from .stream_bus import StreamBus
from .workload_generator import TrafficGenerator

logger = logging.getLogger(__name__)


class PipelineRole(str, Enum):
    PRODUCTION = "production"
    TESTING = "testing"


class PipelineState(str, Enum):
    PROVISIONING = "provisioning"
    RUNNING = "running"
    RECOVERING = "recovering"
    STOPPED = "stopped"
    DECOMMISSIONED = "decommissioned"
    FAILED = "failed"


@dataclass
class PipelineHandle:
    pipeline_id: str
    namespace: str
    role: PipelineRole
    config: ConfigSet
    store: ResultStore
    metrics: MetricsView
    state: PipelineState = PipelineState.PROVISIONING
    pipeline: Optional[StreamPipeline] = None
    slots: int = 0
    rounds_completed: int = 0
    failure: Optional[str] = None

    @property
    def output_topic(self) -> str:
        return f"{self.namespace}.results"


@dataclass
class GatewayEvent:
    seq: int
    action: str
    target: str
    detail: str = ""


class ClientGateway:
    """Routes client reads; the routing table always sums to 1 and switches atomically"""

    def __init__(self, production_id: str, log: Callable[[str, str, str], None]):
        self._routing: Dict[str, float] = {production_id: 1.0}
        self._lock = threading.Lock()
        self._log = log
        self._log("route", production_id, "initial")

    @property
    def routing(self) -> Dict[str, float]:
        with self._lock:
            return dict(self._routing)

    @property
    def target(self) -> str:
        with self._lock:
            return max(self._routing, key=self._routing.get)

    def fraction(self, pipeline_id: str) -> float:
        with self._lock:
            return self._routing.get(pipeline_id, 0.0)

    def switch(self, pipeline_id: str):
        with self._lock:
            previous = max(self._routing, key=self._routing.get)
            self._routing = {pipeline_id: 1.0}
        self._log("route", pipeline_id, f"from {previous}")
        logger.info(f"Client gateway switched from {previous} to {pipeline_id}")


@dataclass
class RoundSummary:
    round: int
    seed: int
    trace_digest: str
    records_published: int
    input_hashes: Dict[str, str] = field(default_factory=dict)
    injections: List[InjectionRecord] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)

    @property
    def inputs_identical(self) -> bool:
        return len(set(self.input_hashes.values())) <= 1


@dataclass
class RunOutcome:
    rounds: List[RoundSummary]
    report: ComparisonReport
    series: Dict[str, VariantSeries] = field(default_factory=dict)
    failed: List[str] = field(default_factory=list)


def _topic_identities(bus: StreamBus, topic: str) -> Set[ResultIdentity]:
    identities = set()
    if not bus.has_topic(topic):
        return identities
    for p in range(bus.partition_count(topic)):
        for record in bus.records(topic, p):
            identities.add(WindowResult.from_line(record.payload.decode("utf-8")).identity)
    return identities


class ExperimentOrchestrator:
    """
    Provisions variant pipelines next to production, drives them through the
    experiment rounds on one simulated clock and promotes a winner.
    """

    def __init__(
        self,
        production_config: Optional[ConfigSet] = None,
        slot_budget: Optional[int] = None,
        bus: Optional[StreamBus] = None,
        metrics: Optional[MetricsStore] = None,
        experiment_id: str = "experiment",
        production_id: str = settings.PRODUCTION_PIPELINE_ID,
    ):
        self.bus = bus or StreamBus()
        self.metrics = metrics or MetricsStore()
        self.slot_budget = settings.DEFAULT_SLOT_BUDGET if slot_budget is None else slot_budget
        self.experiment_id = experiment_id
        self.handles: Dict[str, PipelineHandle] = {}
        self.event_log: List[GatewayEvent] = []
        self.production_id = production_id
        self.injector: Optional[ChaosInjector] = None
        # called with each migrate step before it copies anything
        self.migration_fault: Optional[Callable[[PromotionStep], None]] = None
        self._slots_in_use = 0
        self._log_lock = threading.Lock()

        production = self._create_handle(production_id, PipelineRole.PRODUCTION,
                                         production_config or ConfigSet(), namespace=production_id)
        self._allocate([production])
        self.gateway = ClientGateway(production_id, self._log_event)

    # ------------------------------------------------------------------
    # Bookkeeping
    # ------------------------------------------------------------------

    def _log_event(self, action: str, target: str, detail: str = ""):
        with self._log_lock:
            self.event_log.append(GatewayEvent(len(self.event_log) + 1, action, target, detail))

    @property
    def free_slots(self) -> int:
        return self.slot_budget - self._slots_in_use

    @property
    def production(self) -> PipelineHandle:
        return self.handles[self.production_id]

    def _create_handle(self, pipeline_id: str, role: PipelineRole, config: ConfigSet,
                       namespace: str, store: Optional[ResultStore] = None) -> PipelineHandle:
        handle = PipelineHandle(
            pipeline_id=pipeline_id,
            namespace=namespace,
            role=role,
            config=config,
            store=store or ResultStore(pipeline_id),
            metrics=self.metrics.view(pipeline_id),
        )
        self.handles[pipeline_id] = handle
        return handle

    def _allocate(self, handles: Sequence[PipelineHandle]):
        for handle in handles:
            spec = PipelineSpec(handle.pipeline_id, handle.config, handle.namespace, handle.role.value)
            handle.pipeline = StreamPipeline(spec, self.bus, handle.store, handle.metrics)
            handle.slots = handle.config.slot_demand
            self._slots_in_use += handle.slots
            handle.state = PipelineState.RUNNING
            handle.metrics.record("provisioning_ms", handle.slots * settings.PROVISION_MS_PER_SLOT, 0)

    def _release(self, handle: PipelineHandle):
        if handle.slots:
            self._slots_in_use -= handle.slots
            handle.slots = 0
        self.bus.delete_topic(handle.output_topic)

    def add_pipeline(self, pipeline_id: str, config: ConfigSet, namespace: Optional[str] = None,
                     store: Optional[ResultStore] = None) -> PipelineHandle:
        """Attach a testing pipeline outside of a plan, e.g. when reloading a finished run"""
        if pipeline_id in self.handles:
            raise ProvisioningError(f"pipeline {pipeline_id} already exists")
        handle = self._create_handle(pipeline_id, PipelineRole.TESTING, config,
                                     namespace or f"{self.experiment_id}-{pipeline_id}", store)
        handle.state = PipelineState.STOPPED
        return handle

    # ------------------------------------------------------------------
    # Provisioning
    # ------------------------------------------------------------------

    def provision(self, plan: ExperimentPlan) -> List[PipelineHandle]:
        """Create every variant of the plan at once, or none of them"""
        start = time.perf_counter()
        namespaces = {h.namespace for h in self.handles.values()}
        requested = []
        for variant in plan.variants:
            namespace = f"{plan.experiment_id}-{variant.name}"
            if variant.name in self.handles or namespace in namespaces:
                raise ProvisioningError(f"namespace {namespace} is already in use")
            namespaces.add(namespace)
            requested.append((variant, namespace))

        demand = sum(v.config.slot_demand for v, _ in requested)
        if demand > self.free_slots:
            raise ResourceBudgetExceededError(
                f"plan needs {demand} worker slots, {self.free_slots} of {self.slot_budget} free"
            )

        handles = [
            self._create_handle(variant.name, PipelineRole.TESTING, variant.config, namespace)
            for variant, namespace in requested
        ]
        self._allocate(handles)
        elapsed = (time.perf_counter() - start) * 1000
        logger.info(
            f"Provisioned {len(handles)} variants ({demand} slots) for {plan.experiment_id} in {elapsed:.1f} ms"
        )
        return [self.production] + handles

    def describe_provisioning(self, plan: ExperimentPlan) -> Dict:
        return {
            "experiment_id": plan.experiment_id,
            "slot_budget": self.slot_budget,
            "slots_free": self.free_slots,
            "pipelines": [
                {"pipeline_id": self.production_id, "role": "production", "reused": True,
                 "slots": plan.production.slot_demand}
            ] + [
                {"pipeline_id": v.name, "role": "testing", "namespace": f"{plan.experiment_id}-{v.name}",
                 "slots": v.config.slot_demand}
                for v in plan.variants
            ],
            "slots_requested": sum(v.config.slot_demand for v in plan.variants),
        }

    # ------------------------------------------------------------------
    # Rounds
    # ------------------------------------------------------------------

    def _mark_failed(self, handle: PipelineHandle, error: Exception):
        handle.state = PipelineState.FAILED
        handle.failure = str(error)
        if handle.pipeline is not None:
            handle.pipeline.status = "failed"
        logger.error(f"Pipeline {handle.pipeline_id} failed: {error}")

    def _advance_all(self, pool: ThreadPoolExecutor, handles: List[PipelineHandle], until_ms: int):
        running = [h for h in handles if h.state == PipelineState.RUNNING]
        futures = [(h, pool.submit(h.pipeline.advance, until_ms)) for h in running]
        for handle, future in futures:
            try:
                future.result()
            except PipelineFatalError as e:
                self._mark_failed(handle, e)
            except Exception as e:
                logger.exception(f"Unexpected error advancing {handle.pipeline_id}")
                self._mark_failed(handle, e)

    def run_round(self, plan: ExperimentPlan, handles: List[PipelineHandle], round_no: int,
                  injector: ChaosInjector) -> RoundSummary:
        seed = plan.seed if plan.identical_round_traces else plan.seed ^ round_no
        topic = f"traffic.input.r{round_no:02d}"
        self.bus.create_topic(topic, plan.workload.input_partitions)
        start_ms = plan.round_start_s * 1000
        end_ms = start_ms + plan.round_duration_s * 1000
        epoch_ms = plan.epoch_s * 1000

        active = [h for h in handles if h.state == PipelineState.RUNNING]
        for handle in active:
            handle.pipeline.start_round(round_no, topic, start_ms, metrics_from_ms=start_ms + plan.warmup_s * 1000)
        injector.schedule(plan.scenario, [h.pipeline for h in active],
                          plan.round_duration_s * 1000, offset_ms=start_ms, round_no=round_no)

        generator = TrafficGenerator(plan.workload, plan.workload.load_model(plan.scale_factor), seed)
        digest = hashlib.sha256()
        published = 0
        with ThreadPoolExecutor(max_workers=max(1, len(active)), thread_name_prefix="pipeline") as pool:
            for epoch_start in range(start_ms, end_ms, epoch_ms):
                epoch_end = min(epoch_start + epoch_ms, end_ms)
                for t in range(epoch_start // 1000, epoch_end // 1000):
                    for message in generator.step(t):
                        line = message.to_line().encode("utf-8")
                        digest.update(line + b"\n")
                        self.bus.publish(topic, message.vehicle_id.encode("utf-8"), line, message.event_time_ms)
                        published += 1
                self._advance_all(pool, active, epoch_end)

        summary = RoundSummary(round=round_no, seed=seed, trace_digest=digest.hexdigest(),
                               records_published=published)
        for handle in active:
            if handle.state != PipelineState.RUNNING:
                summary.failed.append(handle.pipeline_id)
                continue
            handle.pipeline.finish()
            handle.rounds_completed += 1
            summary.input_hashes[handle.pipeline_id] = handle.pipeline.input_hash()
        summary.injections = injector.records_for(round_no=round_no)
        self.bus.delete_topic(topic)
        logger.info(
            f"Round {round_no} of {plan.experiment_id} done: {published} records, "
            f"{len(summary.injections)} injections, failed={summary.failed}"
        )
        return summary

    def run(self, plan: ExperimentPlan, handles: Optional[List[PipelineHandle]] = None) -> RunOutcome:
        handles = handles if handles is not None else list(self.handles.values())
        self.injector = ChaosInjector(plan.seed, self.production_id)
        rounds = [self.run_round(plan, handles, r, self.injector) for r in range(1, plan.rounds + 1)]
        for handle in handles:
            if handle.state == PipelineState.RUNNING:
                handle.state = PipelineState.STOPPED

        failed = sorted(h.pipeline_id for h in handles if h.state == PipelineState.FAILED)
        report, series = analyze_store(
            self.metrics,
            plan,
            roles={h.pipeline_id: h.role.value for h in handles},
            failed=failed,
            rounds_completed={h.pipeline_id: h.rounds_completed for h in handles},
            baseline=self.production_id,
        )
        return RunOutcome(rounds=rounds, report=report, series=series, failed=failed)

    # ------------------------------------------------------------------
    # Promotion
    # ------------------------------------------------------------------

    def plan_promotion(self, winner_id: str) -> PromotionPlan:
        production = self.production
        if winner_id == production.pipeline_id:
            return PromotionPlan(winner=winner_id, production=production.pipeline_id, noop=True)
        winner = self.handles.get(winner_id)
        if winner is None:
            raise PromotionError(f"unknown pipeline {winner_id}")
        if winner.state in (PipelineState.FAILED, PipelineState.DECOMMISSIONED):
            raise PromotionError(f"pipeline {winner_id} is {winner.state.value} and cannot be promoted")

        steps: List[PromotionStep] = []
        store_delta = len(production.store.missing_from(winner.store))
        if store_delta:
            steps.append(PromotionStep(order=len(steps) + 1, kind="migrate", target=winner_id,
                                       source=production.pipeline_id, resource="store", records=store_delta))
        topic_delta = len(_topic_identities(self.bus, production.output_topic)
                          - _topic_identities(self.bus, winner.output_topic))
        if topic_delta and self.bus.has_topic(winner.output_topic):
            steps.append(PromotionStep(order=len(steps) + 1, kind="migrate", target=winner_id,
                                       source=production.pipeline_id, resource="topic", records=topic_delta))
        steps.append(PromotionStep(order=len(steps) + 1, kind="switch", target=winner_id,
                                   source=production.pipeline_id))
        decommission = sorted(
            pid for pid, h in self.handles.items()
            if pid != winner_id and h.state != PipelineState.DECOMMISSIONED
        )
        for pid in decommission:
            steps.append(PromotionStep(order=len(steps) + 1, kind="decommission", target=pid))
        return PromotionPlan(
            winner=winner_id,
            production=production.pipeline_id,
            steps=steps,
            decommission=decommission,
            estimated_migration_records=store_delta + topic_delta,
        )

    def _migrate(self, step: PromotionStep, source: PipelineHandle, target: PipelineHandle) -> int:
        if self.migration_fault is not None:
            self.migration_fault(step)
        if step.resource == "store":
            return target.store.extend(source.store.missing_from(target.store))
        present = _topic_identities(self.bus, target.output_topic)
        copied = 0
        for p in range(self.bus.partition_count(source.output_topic)):
            for record in self.bus.records(source.output_topic, p):
                result = WindowResult.from_line(record.payload.decode("utf-8"))
                if result.identity in present:
                    continue
                present.add(result.identity)
                self.bus.publish(target.output_topic, record.key, record.payload, record.ingest_time_ms)
                copied += 1
        return copied

    def execute_promotion(self, plan: PromotionPlan) -> Dict:
        """Migrate, switch the gateway, then decommission; a failed migration leaves routing untouched"""
        if plan.noop:
            return self.state()
        if self.gateway.fraction(plan.production) != 1.0:
            raise PromotionError(f"gateway does not route every read to {plan.production}")
        source = self.handles[plan.production]
        target = self.handles[plan.winner]

        for step in plan.steps_of("migrate"):
            try:
                copied = self._migrate(step, source, target)
            except Exception as e:
                self._log_event("abort", plan.winner, f"{step.resource}: {e}")
                logger.error(f"Migration of {step.resource} into {plan.winner} failed, promotion aborted: {e}")
                raise MigrationError(f"migrating {step.resource} into {plan.winner} failed: {e}") from e
            self._log_event("migrate", plan.winner, f"{step.resource}: {copied} records")

        self.gateway.switch(plan.winner)
        target.role = PipelineRole.PRODUCTION
        source.role = PipelineRole.TESTING
        self.production_id = plan.winner

        for pid in plan.decommission:
            handle = self.handles[pid]
            if self.gateway.fraction(pid) > 0:
                raise PromotionError(f"refusing to decommission {pid}, it still serves reads")
            self._release(handle)
            handle.state = PipelineState.DECOMMISSIONED
            self._log_event("decommission", pid)
        logger.info(f"Promoted {plan.winner}, decommissioned {', '.join(plan.decommission) or 'nothing'}")
        return self.state()

    def routing_violations(self) -> List[GatewayEvent]:
        """Replay the event log; any route to an already decommissioned pipeline is a violation"""
        decommissioned: Set[str] = set()
        violations = []
        for event in self.event_log:
            if event.action == "decommission":
                decommissioned.add(event.target)
            elif event.action == "route" and event.target in decommissioned:
                violations.append(event)
        return violations

    def state(self) -> Dict:
        return {
            "production": self.production_id,
            "routing": self.gateway.routing,
            "pipelines": {
                pid: {"role": h.role.value, "state": h.state.value, "records": len(h.store)}
                for pid, h in sorted(self.handles.items())
            },
            "slots_in_use": self._slots_in_use,
            "events": [
                {"seq": e.seq, "action": e.action, "target": e.target, "detail": e.detail}
                for e in self.event_log
            ],
        }

    # ------------------------------------------------------------------
    # Teardown
    # ------------------------------------------------------------------

    def export(self, handle: PipelineHandle, out_dir: str) -> Tuple[str, str]:
        metrics_path = os.path.join(out_dir, "metrics", f"{handle.pipeline_id}.csv")
        store_path = os.path.join(out_dir, "stores", f"{handle.pipeline_id}.csv")
        handle.metrics.export_csv(metrics_path)
        handle.store.dump(store_path)
        return metrics_path, store_path

    def teardown(self, handles: Optional[Sequence[PipelineHandle]] = None, out_dir: Optional[str] = None) -> bool:
        """Export every pipeline, then remove testing namespaces and give their slots back"""
        handles = list(handles) if handles is not None else list(self.handles.values())
        for handle in handles:
            if out_dir is not None:
                self.export(handle, out_dir)
            if handle.role == PipelineRole.PRODUCTION or handle.state == PipelineState.DECOMMISSIONED:
                continue
            self._release(handle)
            handle.state = PipelineState.DECOMMISSIONED
            logger.info(f"Tore down {handle.namespace}")
        return True
