from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Union, Literal
from enum import Enum

from ..core.config import settings

DEFAULT_TYPE_WEIGHTS = {"car": 0.7, "truck": 0.1, "bus": 0.05, "motorcycle": 0.15}
DEFAULT_TYPE_MAX_SPEED_MPS = {"car": 13.9, "truck": 11.1, "bus": 11.1, "motorcycle": 16.7}

NAME_PATTERN = r"^[a-z0-9][a-z0-9_-]*$"


class StrictModel(BaseModel):
    """Plan sections reject unknown keys"""
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Workload
# ---------------------------------------------------------------------------

class LoadModel(StrictModel):
    v_min: int = Field(default=25000, ge=0)
    v_max: int = Field(default=75000, ge=0)
    period_s: float = Field(default=86400.0, gt=0)
    # None places the trough at t=0
    phase_s: Optional[float] = None

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.v_min > self.v_max:
            raise ValueError("v_min must not exceed v_max")
        if self.phase_s is None:
            self.phase_s = self.period_s / 4.0
        return self


class GeoCenter(StrictModel):
    lat: float = Field(default=52.520008, ge=-90, le=90)
    lon: float = Field(default=13.404954, ge=-180, le=180)


class WorkloadSpec(StrictModel):
    v_min: int = Field(default=25000, ge=0)
    v_max: int = Field(default=75000, ge=0)
    period_s: float = Field(default=86400.0, gt=0)
    phase_s: Optional[float] = None
    radius_m: float = Field(default=1000.0, gt=0)
    center: GeoCenter = Field(default_factory=GeoCenter)
    type_weights: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_TYPE_WEIGHTS))
    type_max_speed_mps: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_TYPE_MAX_SPEED_MPS))
    waypoint_count: int = Field(default=200, ge=2)
    route_length: int = Field(default=5, ge=2)
    input_partitions: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _check_types(self):
        if self.v_min > self.v_max:
            raise ValueError("v_min must not exceed v_max")
        if not self.type_weights:
            raise ValueError("type_weights must name at least one vehicle type")
        for vehicle_type, weight in self.type_weights.items():
            if weight <= 0:
                raise ValueError(f"type weight for {vehicle_type} must be positive")
            if "," in vehicle_type:
                raise ValueError(f"vehicle type {vehicle_type!r} must not contain a comma")
            speed = self.type_max_speed_mps.get(vehicle_type)
            if speed is None or speed <= 0:
                raise ValueError(f"type_max_speed_mps needs a positive entry for {vehicle_type}")
        return self

    def load_model(self, scale_factor: float = 1.0) -> LoadModel:
        """Load model with counts scaled linearly (half-up rounding)"""
        def scale(count: int) -> int:
            return int(count * scale_factor + 0.5)

        return LoadModel(
            v_min=scale(self.v_min),
            v_max=scale(self.v_max),
            period_s=self.period_s,
            phase_s=self.phase_s,
        )


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------

class ConfigSet(StrictModel):
    checkpoint_interval_ms: int = Field(default=60000, gt=0)
    window_length_ms: int = Field(default=300000, gt=0)
    parallelism: int = Field(default=8, ge=1)
    worker_count: int = Field(default=10, ge=1)
    coordinator_count: int = Field(default=1, ge=1)
    slots_per_worker: int = Field(default=1, ge=1)
    heap_per_worker_mb: int = Field(default=1024, ge=1)

    # checkpoint cost: stall = c0 + c1 * state_size
    checkpoint_base_ms: float = Field(default=50.0, ge=0)
    checkpoint_ms_per_record: float = Field(default=0.01, ge=0)

    # recovery: restart_delay + c2 * state_size + backlog / recovery_rate
    restart_delay_ms: float = Field(default=2000.0, ge=0)
    restore_ms_per_record: float = Field(default=0.02, ge=0)
    recovery_rate_msg_s: float = Field(default=2000.0, gt=0)
    max_restarts: int = Field(default=100, ge=0)

    # queueing servers (per slot)
    source_capacity_msg_s: float = Field(default=40.0, gt=0)
    task_capacity_msg_s: float = Field(default=100.0, gt=0)
    hop_cost_ms: float = Field(default=2.0, ge=0)
    hop_count: int = Field(default=3, ge=1)
    marker_interval_ms: int = Field(default=100, gt=0)

    tick_ms: int = Field(default=1000, gt=0)
    metric_interval_ms: int = Field(default=1000, gt=0)
    fetch_max_records: int = Field(default=10000, ge=1)

    # resource model
    cpu_base_pct: float = Field(default=5.0, ge=0)
    cpu_pct_per_msg_s: float = Field(default=1.0, ge=0)
    cpu_checkpoint_pct: float = Field(default=10.0, ge=0)
    heap_overhead_mb: float = Field(default=128.0, ge=0)
    # records fetched, queued or processed in the last tick
    heap_mb_per_record: float = Field(default=0.5, ge=0)
    # records folded into open window counts
    heap_mb_per_state_record: float = Field(default=0.0002, ge=0)
    coordinator_scale: float = Field(default=0.25, ge=0, le=1)

    @model_validator(mode="after")
    def _check_slots(self):
        if self.parallelism > self.worker_count * self.slots_per_worker:
            raise ValueError("parallelism must not exceed worker_count * slots_per_worker")
        if self.metric_interval_ms % self.tick_ms != 0:
            raise ValueError("metric_interval_ms must be a multiple of tick_ms")
        return self

    @property
    def slot_demand(self) -> int:
        return self.worker_count + self.coordinator_count


# ---------------------------------------------------------------------------
# Failure scenarios
# ---------------------------------------------------------------------------

class FailureKind(str, Enum):
    WORKER_KILL = "worker_kill"
    WORKER_SLOWDOWN = "worker_slowdown"
    PAUSE_RESUME = "pause_resume"


class FailureEvent(StrictModel):
    at_ms: int = Field(ge=0)
    kind: FailureKind
    target: Union[int, Literal["random"]] = "random"
    duration_ms: Optional[int] = None
    slowdown_factor: Optional[float] = None

    @model_validator(mode="after")
    def _check_kind_fields(self):
        if isinstance(self.target, int) and self.target < 0:
            raise ValueError("target worker index must be nonnegative")
        if self.kind in (FailureKind.WORKER_SLOWDOWN, FailureKind.PAUSE_RESUME):
            if self.duration_ms is None or self.duration_ms <= 0:
                raise ValueError(f"{self.kind.value} needs duration_ms > 0")
        if self.kind == FailureKind.WORKER_SLOWDOWN:
            if self.slowdown_factor is None or self.slowdown_factor <= 1:
                raise ValueError("worker_slowdown needs slowdown_factor > 1")
        return self


class FailureScenario(StrictModel):
    name: str = "none"
    events: List[FailureEvent] = Field(default_factory=list)
    apply_to: Union[Literal["all"], List[str]] = "all"
    include_production: bool = False

    @field_validator("events")
    @classmethod
    def _sort_events(cls, events: List[FailureEvent]) -> List[FailureEvent]:
        return sorted(events, key=lambda e: e.at_ms)


# ---------------------------------------------------------------------------
# QoS and analysis
# ---------------------------------------------------------------------------

class Objective(str, Enum):
    LATENCY = "latency"
    THROUGHPUT = "throughput"
    RECOVERY_TIME = "recovery_time"


class EvaluationWindow(StrictModel):
    from_ms: int = Field(default=0, ge=0)
    to_ms: Optional[int] = None

    @model_validator(mode="after")
    def _check_range(self):
        if self.to_ms is not None and self.to_ms < self.from_ms:
            raise ValueError("evaluation window needs from_ms <= to_ms")
        return self


class QoSTarget(StrictModel):
    max_latency_ms: Optional[float] = Field(default=None, gt=0)
    latency_percentile: float = Field(default=50.0, gt=0, le=100)
    min_throughput_msg_s: Optional[float] = Field(default=None, gt=0)
    max_recovery_time_ms: Optional[float] = Field(default=None, gt=0)
    evaluation_window: EvaluationWindow = Field(default_factory=EvaluationWindow)


class AnalysisOptions(StrictModel):
    ewma_span_s: float = Field(default=1000.0, ge=1)
    alpha: float = Field(default=0.05, gt=0, lt=1)
    objective: Objective = Objective.LATENCY
    charts: bool = False


class ClusterSpec(StrictModel):
    worker_slots: int = Field(default_factory=lambda: settings.DEFAULT_SLOT_BUDGET, ge=1)


class VariantSpec(StrictModel):
    name: str = Field(pattern=NAME_PATTERN)
    config: ConfigSet = Field(default_factory=ConfigSet)


# ---------------------------------------------------------------------------
# Experiment plan
# ---------------------------------------------------------------------------

class ExperimentPlan(StrictModel):
    version: Literal[1] = 1
    experiment_id: str = Field(default="experiment", pattern=NAME_PATTERN)
    seed: int = Field(default=0, ge=0)
    scale_factor: float = Field(default=1.0, gt=0)
    rounds: int = Field(default=5, ge=1)
    round_duration_s: int = Field(default=21600, gt=0)
    round_start_s: int = Field(default=0, ge=0)
    warmup_s: int = Field(default=0, ge=0)
    epoch_s: int = Field(default=60, gt=0)
    identical_round_traces: bool = False
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    production: ConfigSet = Field(default_factory=ConfigSet)
    variants: List[VariantSpec] = Field(min_length=1)
    scenario: FailureScenario = Field(default_factory=FailureScenario)
    qos: QoSTarget = Field(default_factory=QoSTarget)
    analysis: AnalysisOptions = Field(default_factory=AnalysisOptions)
    cluster: ClusterSpec = Field(default_factory=ClusterSpec)

    @model_validator(mode="after")
    def _check_plan(self):
        names = [v.name for v in self.variants]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate variant names: {', '.join(duplicates)}")
        if settings.PRODUCTION_PIPELINE_ID in names:
            raise ValueError(f"variant name {settings.PRODUCTION_PIPELINE_ID!r} is reserved")
        if self.warmup_s >= self.round_duration_s:
            raise ValueError("warmup_s must be shorter than round_duration_s")
        duration_ms = self.round_duration_s * 1000
        for event in self.scenario.events:
            if event.at_ms >= duration_ms:
                raise ValueError(f"scenario event at {event.at_ms} ms lies beyond the round duration")
        if self.scenario.apply_to != "all":
            unknown = sorted(set(self.scenario.apply_to) - set(names) - {settings.PRODUCTION_PIPELINE_ID})
            if unknown:
                raise ValueError(f"scenario.apply_to names unknown variants: {', '.join(unknown)}")
        return self

    def variant_configs(self) -> Dict[str, ConfigSet]:
        return {v.name: v.config for v in self.variants}


# ---------------------------------------------------------------------------
# Analysis output
# ---------------------------------------------------------------------------

class QoSVerdict(BaseModel):
    target: str
    threshold: float
    observed: Optional[float] = None
    passed: bool


class VariantSummary(BaseModel):
    name: str
    role: str
    failed: bool = False
    rounds_completed: int = 0
    stats: Dict[str, Optional[float]] = Field(default_factory=dict)
    qos: List[QoSVerdict] = Field(default_factory=list)
    qos_passed: bool = False


class ComparisonReport(BaseModel):
    schema_version: int = 1
    experiment_id: str
    baseline: str
    objective: Objective
    alpha: float
    variants: List[VariantSummary]
    significance: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    ranking: List[str] = Field(default_factory=list)
    winner: Optional[str] = None
    tradeoff_note: str = ""
    failed_variants: List[str] = Field(default_factory=list)

    def variant(self, name: str) -> Optional[VariantSummary]:
        for summary in self.variants:
            if summary.name == name:
                return summary
        return None


# ---------------------------------------------------------------------------
# Promotion
# ---------------------------------------------------------------------------

class PromotionStep(BaseModel):
    order: int
    kind: Literal["migrate", "switch", "decommission"]
    target: str
    source: Optional[str] = None
    resource: Optional[str] = None
    records: int = 0


class PromotionPlan(BaseModel):
    winner: str
    production: str
    steps: List[PromotionStep] = Field(default_factory=list)
    decommission: List[str] = Field(default_factory=list)
    estimated_migration_records: int = 0
    noop: bool = False

    def steps_of(self, kind: str) -> List[PromotionStep]:
        return [s for s in self.steps if s.kind == kind]
