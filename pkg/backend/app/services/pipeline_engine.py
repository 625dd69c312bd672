import bisect
import hashlib
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np

from ..core.exceptions import ClockRegressionError, PipelineFatalError
from ..models.records import WindowResult
from ..models.schemas import ConfigSet
from ..utils.hashing import stable_hash64
from .metrics_store import MetricPoint, MetricsView
from .result_store import ResultStore
from .stream_bus import StreamBus

logger = logging.getLogger(__name__)

TaskItem = Tuple[int, str]


@dataclass
class PipelineSpec:
    pipeline_id: str
    config: ConfigSet
    namespace: str = ""
    role: str = "testing"

    @property
    def input_group(self) -> str:
        return f"{self.namespace or self.pipeline_id}.input"

    @property
    def output_topic(self) -> str:
        return f"{self.namespace or self.pipeline_id}.results"


@dataclass
class Checkpoint:
    checkpoint_id: int
    trigger_time_ms: int
    completed_time_ms: float
    stall_ms: float
    state_size: int
    offsets: Dict[int, int]
    window_state: List[Dict[int, Dict[str, int]]] = field(repr=False)
    queues: List[List[TaskItem]] = field(repr=False)
    source_queues: List[float] = field(repr=False)
    source_watermark_ms: int = -1

    @property
    def total_offset(self) -> int:
        return sum(self.offsets.values())


@dataclass(frozen=True)
class LatencySample:
    marker_source_time_ms: float
    sink_arrival_time_ms: float
    sink_index: int

    @property
    def latency_ms(self) -> float:
        return self.sink_arrival_time_ms - self.marker_source_time_ms


@dataclass
class RecoveryReport:
    failure_time_ms: int
    worker: Optional[int]
    restored_checkpoint_id: Optional[int]
    backlog_records: int
    state_size: int
    downtime_ms: float
    recovery_time_ms: float
    nested: bool = False
    aborted_checkpoint_id: Optional[int] = None


@dataclass
class AdvanceResult:
    results: List[WindowResult] = field(default_factory=list)
    checkpoints: List[Checkpoint] = field(default_factory=list)
    recoveries: List[RecoveryReport] = field(default_factory=list)


@dataclass
class _Block:
    start_ms: float
    end_ms: float
    # None blocks every slot
    slots: Optional[FrozenSet[int]]
    reason: str


@dataclass
class _Slowdown:
    start_ms: float
    end_ms: float
    factor: float
    slots: FrozenSet[int]


class _IntervalStats:
    def __init__(self, parallelism: int, workers: int):
        self.ticks = 0
        self.fetched = 0
        self.latency_sum = np.zeros(parallelism)
        self.latency_ticks = 0
        self.queue_sum = np.zeros(parallelism)
        self.cpu_sum = np.zeros(workers)
        self.heap_sum = np.zeros(workers)
        self.coordinator_cpu_sum = 0.0
        self.coordinator_heap_sum = 0.0


def _clamp_pct(value: float) -> float:
    return min(100.0, max(0.0, value))


class StreamPipeline:
    """
    Windowed count pipeline: source stage -> keyBy(vehicle type) -> tumbling
    event-time window -> sink, run on a simulated worker cluster.

    Time advances in fixed ticks. Inside a tick the order is: armed chaos events,
    checkpoint triggers, fetch from the bus, latency markers, window service,
    window firing, metrics. Checkpoint stalls and recovery downtime block every
    slot; pauses block the slots of one worker.
    """

    def __init__(self, spec: PipelineSpec, bus: StreamBus, store: ResultStore, metrics: MetricsView):
        self.spec = spec
        self.config = spec.config
        self.pipeline_id = spec.pipeline_id
        self.bus = bus
        self.store = store
        self.metrics = metrics
        self.status = "idle"
        self.round = 0
        self.input_topic: Optional[str] = None
        self.restarts = 0
        self.recoveries: List[RecoveryReport] = []
        self._chaos_hook: Optional[Callable[[Any, "StreamPipeline"], Any]] = None
        self._task_cache: Dict[str, int] = {}
        self._type_names: Dict[bytes, str] = {}

        P, W = self.config.parallelism, self.config.worker_count
        self._worker_slots = [frozenset(k for k in range(P) if k % W == w) for w in range(W)]

        if not bus.has_topic(spec.output_topic):
            bus.create_topic(spec.output_topic, P)
        bus.register_group(spec.input_group)
        self._reset(0)

    # ------------------------------------------------------------------
    # Round lifecycle
    # ------------------------------------------------------------------

    def _reset(self, start_ms: int):
        P, W = self.config.parallelism, self.config.worker_count
        self._clock = start_ms
        self._round_start_ms = start_ms
        self._metrics_from_ms = start_ms
        self._windows: List[Dict[int, Dict[str, int]]] = [{} for _ in range(P)]
        self._queues: List[Deque[TaskItem]] = [deque() for _ in range(P)]
        self._credit = [0.0] * P
        self._source_queue = [0.0] * P
        self._slot_state = [0] * P
        self._state_records = 0
        self._source_watermark = -1
        self._partition_count = 0
        self._positions: Dict[int, int] = {}
        self._hashers: Dict[int, Any] = {}
        self._hashed_upto: Dict[int, int] = {}

        self._next_checkpoint_id = 1
        self._next_trigger_ms = start_ms
        self._pending: Optional[Checkpoint] = None
        self._completed: Optional[Checkpoint] = None
        self._ckpt_completed_at: List[float] = []
        self._ckpt_offsets: List[int] = []
        self._missed = 0
        self._stall_total = 0.0

        self._blocks: List[_Block] = []
        self._slowdowns: List[_Slowdown] = []
        self._worker_down_until: Dict[int, float] = {}
        self._downtime_until = -math.inf
        self._recovering_until = -math.inf
        self._nested = 0
        self._armed: Deque[Any] = deque()

        self._position_t: List[int] = []
        self._position_v: List[int] = []
        self._tick_src = [0] * P
        self._tick_served = [0] * P
        self._tick_checkpoint = False
        self._acc = _IntervalStats(P, W)

    def start_round(self, round_no: int, input_topic: str, start_ms: int = 0, metrics_from_ms: Optional[int] = None):
        self._reset(start_ms)
        self.round = round_no
        self.input_topic = input_topic
        self._metrics_from_ms = start_ms if metrics_from_ms is None else metrics_from_ms
        self._partition_count = self.bus.partition_count(input_topic)
        for p in range(self._partition_count):
            self._positions[p] = self.bus.committed(self.spec.input_group, input_topic, p)
            self._hashers[p] = hashlib.sha256()
            self._hashed_upto[p] = 0
        self.status = "running"
        logger.info(f"[{self.pipeline_id}] round {round_no} started on {input_topic} at {start_ms} ms")

    def arm(self, events: Iterable[Any], hook: Callable[[Any, "StreamPipeline"], Any]):
        """Queue chaos events (objects with an absolute at_ms) to be fired through hook"""
        self._armed = deque(sorted(events, key=lambda e: e.at_ms))
        self._chaos_hook = hook

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def clock_ms(self) -> int:
        return self._clock

    @property
    def state_size(self) -> int:
        return self._state_records

    @property
    def missed_checkpoints(self) -> int:
        return self._missed

    @property
    def checkpoints_taken(self) -> int:
        return self._next_checkpoint_id - 1

    @property
    def cumulative_stall_ms(self) -> float:
        return self._stall_total

    @property
    def nested_recoveries(self) -> int:
        return self._nested

    @property
    def last_completed_checkpoint(self) -> Optional[Checkpoint]:
        return self._completed

    def queue_lengths(self) -> List[int]:
        return [len(q) for q in self._queues]

    def positions(self) -> Dict[int, int]:
        return dict(self._positions)

    def task_of(self, vehicle_type: str) -> int:
        task = self._task_cache.get(vehicle_type)
        if task is None:
            task = stable_hash64(vehicle_type) % self.config.parallelism
            self._task_cache[vehicle_type] = task
        return task

    def slots_of_worker(self, worker: int) -> FrozenSet[int]:
        return self._worker_slots[worker]

    def is_worker_down(self, worker: int, t_ms: float) -> bool:
        return self._worker_down_until.get(worker, -math.inf) > t_ms

    def is_recovering(self, t_ms: float) -> bool:
        return t_ms < self._recovering_until

    def input_hash(self) -> str:
        """Digest over every input record consumed this round, per partition in order"""
        combined = hashlib.sha256()
        for p in sorted(self._hashers):
            combined.update(self._hashers[p].hexdigest().encode("ascii"))
        return combined.hexdigest()

    # ------------------------------------------------------------------
    # Clock
    # ------------------------------------------------------------------

    def advance(self, until_ms: int) -> AdvanceResult:
        if self.status == "failed":
            raise PipelineFatalError(self.pipeline_id, "pipeline has failed and cannot advance")
        if until_ms < self._clock:
            raise ClockRegressionError(f"{self.pipeline_id}: advance to {until_ms} ms behind clock {self._clock} ms")
        out = AdvanceResult()
        recoveries_before = len(self.recoveries)
        tick = self.config.tick_ms
        while self._clock + tick <= until_ms:
            self._tick(self._clock, self._clock + tick, out)
            self._clock += tick
        out.recoveries = self.recoveries[recoveries_before:]
        return out

    def _tick(self, t0: int, t1: int, out: AdvanceResult):
        while self._armed and self._armed[0].at_ms < t1:
            armed = self._armed.popleft()
            if self._chaos_hook is not None:
                self._chaos_hook(armed, self)

        self._settle(t0)
        while self._next_trigger_ms < t1:
            trigger_at = self._next_trigger_ms
            self._next_trigger_ms += self.config.checkpoint_interval_ms
            checkpoint = self.trigger_checkpoint(trigger_at)
            if checkpoint is not None:
                out.checkpoints.append(checkpoint)

        batch = self._fetch(t1)
        P = self.config.parallelism
        arrivals = [0] * P
        for event_time, vehicle_type, partition in batch:
            self._queues[self.task_of(vehicle_type)].append((event_time, vehicle_type))
            arrivals[partition % P] += 1
        for k in range(P):
            self._source_queue[k] += arrivals[k]

        markers = self._marker_matrix(t0, t1)
        served = self._serve(t0, t1)
        results = self._fire_windows(t1)
        self._emit(results)
        out.results.extend(results)

        self._tick_src = arrivals
        self._tick_served = served
        self._tick_checkpoint = any(
            b.reason == "checkpoint" and b.end_ms > b.start_ms and b.start_ms < t1 and b.end_ms > t0
            for b in self._blocks
        )
        self._accumulate(t0, t1, len(batch), markers)
        self._position_t.append(t1)
        self._position_v.append(sum(self._positions.values()))

        self._blocks = [b for b in self._blocks if b.end_ms > t1]
        self._slowdowns = [s for s in self._slowdowns if s.end_ms > t1]

    # ------------------------------------------------------------------
    # Input
    # ------------------------------------------------------------------

    def _fetch(self, t_limit: float) -> List[Tuple[int, str, int]]:
        """Consume every record ingested before t_limit; returns (event_time, type, partition) in merge order"""
        if self.input_topic is None:
            return []
        group, topic = self.spec.input_group, self.input_topic
        batch = []
        for p in range(self._partition_count):
            while True:
                records = self.bus.fetch(group, topic, p, self.config.fetch_max_records)
                take = 0
                for record in records:
                    if record.ingest_time_ms >= t_limit:
                        break
                    take += 1
                if take == 0:
                    break
                hasher, hashed_upto = self._hashers[p], self._hashed_upto[p]
                type_names = self._type_names
                for record in records[:take]:
                    fields = record.payload.split(b",")
                    event_time = int(fields[6])
                    vehicle_type = type_names.get(fields[1])
                    if vehicle_type is None:
                        vehicle_type = type_names[fields[1]] = fields[1].decode("utf-8")
                    batch.append((event_time, p, record.offset, vehicle_type))
                    if event_time > self._source_watermark:
                        self._source_watermark = event_time
                    if record.offset >= hashed_upto:
                        hasher.update(record.payload)
                        hasher.update(b"\n")
                        hashed_upto = record.offset + 1
                self._hashed_upto[p] = hashed_upto
                position = records[take - 1].offset + 1
                self.bus.commit_offset(group, topic, p, position)
                self._positions[p] = position
                if take < len(records):
                    break
        batch.sort(key=lambda item: (item[0], item[1], item[2]))
        return [(event_time, vehicle_type, p) for event_time, p, _, vehicle_type in batch]

    # ------------------------------------------------------------------
    # Service model
    # ------------------------------------------------------------------

    def _slot_blocks(self, slot: int) -> List[_Block]:
        return [b for b in self._blocks if b.slots is None or slot in b.slots]

    def _unblocked_ms(self, slot: int, t0: float, t1: float) -> float:
        spans = sorted(
            (max(b.start_ms, t0), min(b.end_ms, t1))
            for b in self._slot_blocks(slot)
            if b.start_ms < t1 and b.end_ms > t0
        )
        blocked, cursor = 0.0, t0
        for start, end in spans:
            start = max(start, cursor)
            if end > start:
                blocked += end - start
                cursor = end
        return (t1 - t0) - blocked

    def _factor(self, slot: int, t_ms: float) -> float:
        factor = 1.0
        for s in self._slowdowns:
            if s.start_ms <= t_ms < s.end_ms and slot in s.slots:
                factor = max(factor, s.factor)
        return factor

    def _serve(self, t0: int, t1: int) -> List[int]:
        cfg = self.config
        length = cfg.window_length_ms
        served = [0] * cfg.parallelism
        for k in range(cfg.parallelism):
            available_s = self._unblocked_ms(k, t0, t1) / 1000.0 / self._factor(k, t0)
            self._source_queue[k] = max(0.0, self._source_queue[k] - cfg.source_capacity_msg_s * available_s)
            queue = self._queues[k]
            if not queue:
                self._credit[k] = 0.0
                continue
            self._credit[k] += cfg.task_capacity_msg_s * available_s
            n = min(len(queue), int(self._credit[k] + 1e-9))
            if n <= 0:
                continue
            self._credit[k] -= n
            windows = self._windows[k]
            for _ in range(n):
                event_time, vehicle_type = queue.popleft()
                start = event_time - event_time % length
                counts = windows.get(start)
                if counts is None:
                    counts = windows[start] = {}
                counts[vehicle_type] = counts.get(vehicle_type, 0) + 1
            if not queue:
                self._credit[k] = 0.0
            self._slot_state[k] += n
            self._state_records += n
            served[k] = n
        return served

    def _fire_windows(self, now_ms: float, watermark: Optional[float] = None) -> List[WindowResult]:
        length = self.config.window_length_ms
        fired = []
        for k, windows in enumerate(self._windows):
            queue = self._queues[k]
            if watermark is not None:
                task_watermark = watermark
            else:
                task_watermark = queue[0][0] if queue else self._source_watermark
            for start in sorted(ws for ws in windows if ws + length <= task_watermark):
                counts = windows.pop(start)
                total = sum(counts.values())
                self._slot_state[k] -= total
                self._state_records -= total
                emit_time = int(max(now_ms, start + length))
                for vehicle_type in sorted(counts):
                    fired.append(WindowResult(
                        window_start_ms=start,
                        window_end_ms=start + length,
                        vehicle_type=vehicle_type,
                        count=counts[vehicle_type],
                        emit_time_ms=emit_time,
                        sink_index=k,
                        round=self.round,
                    ))
        return fired

    def _emit(self, results: List[WindowResult]):
        topic = self.spec.output_topic
        for result in results:
            self.store.append(result)
            self.bus.publish(topic, result.vehicle_type.encode("utf-8"),
                             result.to_line().encode("utf-8"), result.emit_time_ms)

    # ------------------------------------------------------------------
    # Latency markers
    # ------------------------------------------------------------------

    def _rows(self, block: _Block):
        if block.slots is None:
            return slice(None)
        return np.array(sorted(block.slots), dtype=int)

    def _marker_matrix(self, t0: float, t1: float) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Latency of every marker emitted in [t0, t1) per sink: (marker times, P x M matrix)"""
        cfg = self.config
        period = cfg.marker_interval_ms
        first = -(-int(t0) // period) * period
        xs = np.arange(first, t1, period, dtype=float)
        if xs.size == 0:
            return None
        P = cfg.parallelism
        floor = cfg.hop_cost_ms * cfg.hop_count
        q_src = np.asarray(self._source_queue, dtype=float)
        q_win = np.asarray([len(q) for q in self._queues], dtype=float)
        blocks = [b for b in self._blocks if b.end_ms > t0 and b.end_ms > b.start_ms
                  and (b.slots is None or b.slots)]
        if not blocks and not q_src.any() and not q_win.any():
            return xs, np.full((P, xs.size), floor)

        factors = np.array([self._factor(k, t0) for k in range(P)])
        mu_src = (cfg.source_capacity_msg_s / 1000.0 / factors)[:, None]
        mu_win = (cfg.task_capacity_msg_s / 1000.0 / factors)[:, None]

        serving = np.tile(xs - t0, (P, 1))
        for b in blocks:
            lost = np.clip(np.minimum(b.end_ms, xs) - max(b.start_ms, t0), 0.0, None)
            serving[self._rows(b)] -= lost
        serving = np.maximum(serving, 0.0)

        wait = (np.maximum(0.0, q_src[:, None] - mu_src * serving) / mu_src
                + np.maximum(0.0, q_win[:, None] - mu_win * serving) / mu_win)
        extra = np.zeros_like(wait)
        for b in blocks:
            rows = self._rows(b)
            hit = (b.end_ms > xs) & ((b.start_ms <= xs) | (b.start_ms < xs + wait[rows]))
            extra[rows] += np.where(hit, b.end_ms - np.maximum(b.start_ms, xs), 0.0)
        return xs, floor + wait + extra

    def emit_latency_markers(self, t0: Optional[int] = None, t1: Optional[int] = None) -> List[LatencySample]:
        """Markers over [t0, t1) against the current queue state; defaults to the next tick"""
        t0 = self._clock if t0 is None else t0
        t1 = t0 + self.config.tick_ms if t1 is None else t1
        computed = self._marker_matrix(t0, t1)
        if computed is None:
            return []
        xs, matrix = computed
        return [
            LatencySample(float(x), float(x + matrix[k, i]), k)
            for k in range(matrix.shape[0])
            for i, x in enumerate(xs)
        ]

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def _settle(self, now_ms: float):
        if self._pending is not None and self._pending.completed_time_ms <= now_ms:
            self._completed = self._pending
            self._pending = None

    def trigger_checkpoint(self, at_ms: int) -> Optional[Checkpoint]:
        """Snapshot state at at_ms; None when the trigger is missed"""
        self._settle(at_ms)
        if self._pending is not None or at_ms < self._downtime_until:
            self._missed += 1
            self.metrics.record("checkpoint_missed", 1.0, at_ms, round=str(self.round))
            logger.debug(f"[{self.pipeline_id}] checkpoint trigger at {at_ms} ms missed")
            return None

        cfg = self.config
        stall = cfg.checkpoint_base_ms + cfg.checkpoint_ms_per_record * self._state_records
        checkpoint = Checkpoint(
            checkpoint_id=self._next_checkpoint_id,
            trigger_time_ms=at_ms,
            completed_time_ms=at_ms + stall,
            stall_ms=stall,
            state_size=self._state_records,
            offsets=dict(self._positions),
            window_state=[{ws: dict(c) for ws, c in w.items()} for w in self._windows],
            queues=[list(q) for q in self._queues],
            source_queues=list(self._source_queue),
            source_watermark_ms=self._source_watermark,
        )
        self._next_checkpoint_id += 1
        self._pending = checkpoint
        self._stall_total += stall
        self._ckpt_completed_at.append(checkpoint.completed_time_ms)
        self._ckpt_offsets.append(checkpoint.total_offset)
        if stall > 0:
            self._blocks.append(_Block(at_ms, at_ms + stall, None, "checkpoint"))
        self.metrics.record("checkpoint_stall_ms", stall, at_ms, round=str(self.round))
        self._settle(at_ms)
        return checkpoint

    # ------------------------------------------------------------------
    # Chaos hooks
    # ------------------------------------------------------------------

    def pause_worker(self, worker: int, at_ms: int, duration_ms: int):
        self._blocks.append(_Block(at_ms, at_ms + duration_ms, self._worker_slots[worker], "pause"))
        logger.info(f"[{self.pipeline_id}] worker {worker} paused for {duration_ms} ms at {at_ms} ms")

    def slow_worker(self, worker: int, factor: float, at_ms: int, duration_ms: int):
        self._slowdowns.append(_Slowdown(at_ms, at_ms + duration_ms, factor, self._worker_slots[worker]))
        logger.info(f"[{self.pipeline_id}] worker {worker} slowed x{factor} for {duration_ms} ms at {at_ms} ms")

    def fail_and_recover(self, failure_time_ms: int, worker: Optional[int] = None) -> RecoveryReport:
        """Restore the last completed checkpoint, rewind input positions and replay"""
        self._settle(failure_time_ms)
        nested = failure_time_ms < self._recovering_until
        if nested:
            self._nested += 1
        self.restarts += 1
        if self.restarts > self.config.max_restarts:
            self.status = "failed"
            raise PipelineFatalError(
                self.pipeline_id, f"restart limit {self.config.max_restarts} exceeded at {failure_time_ms} ms"
            )

        aborted = None
        if self._pending is not None:
            aborted = self._pending.checkpoint_id
            self._pending = None
            self._ckpt_completed_at.pop()
            self._ckpt_offsets.pop()

        position_total = sum(self._positions.values())
        checkpoint = self._completed
        P = self.config.parallelism
        if checkpoint is None:
            self._windows = [{} for _ in range(P)]
            self._queues = [deque() for _ in range(P)]
            self._source_queue = [0.0] * P
            self._source_watermark = -1
            self._positions = {p: 0 for p in range(self._partition_count)}
        else:
            self._windows = [{ws: dict(c) for ws, c in w.items()} for w in checkpoint.window_state]
            self._queues = [deque(q) for q in checkpoint.queues]
            self._source_queue = list(checkpoint.source_queues)
            self._source_watermark = checkpoint.source_watermark_ms
            self._positions = dict(checkpoint.offsets)
        self._slot_state = [sum(sum(c.values()) for c in w.values()) for w in self._windows]
        self._state_records = sum(self._slot_state)
        self._credit = [0.0] * P

        if self.input_topic is not None:
            for p, offset in self._positions.items():
                self.bus.commit_offset(self.spec.input_group, self.input_topic, p, offset)

        cfg = self.config
        backlog = position_total - sum(self._positions.values())
        state_size = checkpoint.state_size if checkpoint is not None else 0
        downtime = cfg.restart_delay_ms + cfg.restore_ms_per_record * state_size
        recovery_time = downtime + backlog / cfg.recovery_rate_msg_s * 1000.0

        if downtime > 0:
            self._blocks.append(_Block(failure_time_ms, failure_time_ms + downtime, None, "recovery"))
        self._downtime_until = max(self._downtime_until, failure_time_ms + downtime)
        self._recovering_until = max(self._recovering_until, failure_time_ms + recovery_time)
        if worker is not None:
            self._worker_down_until[worker] = failure_time_ms + downtime

        report = RecoveryReport(
            failure_time_ms=failure_time_ms,
            worker=worker,
            restored_checkpoint_id=checkpoint.checkpoint_id if checkpoint is not None else None,
            backlog_records=backlog,
            state_size=state_size,
            downtime_ms=downtime,
            recovery_time_ms=recovery_time,
            nested=nested,
            aborted_checkpoint_id=aborted,
        )
        self.recoveries.append(report)
        self.metrics.record("recovery_time_ms", recovery_time, failure_time_ms, round=str(self.round))
        self.metrics.record("backlog_records", backlog, failure_time_ms, round=str(self.round))
        logger.info(
            f"[{self.pipeline_id}] failure at {failure_time_ms} ms: restored checkpoint "
            f"{report.restored_checkpoint_id}, backlog {backlog}, recovery {recovery_time:.0f} ms"
        )
        return report

    def estimate_backlog(self, failure_times: Iterable[float]) -> List[int]:
        """Records that a failure at each time would have to replay, from this round's history"""
        estimates = []
        for t in failure_times:
            i = bisect.bisect_right(self._position_t, t) - 1
            position = self._position_v[i] if i >= 0 else 0
            j = bisect.bisect_right(self._ckpt_completed_at, t) - 1
            restored = self._ckpt_offsets[j] if j >= 0 else 0
            estimates.append(max(0, position - restored))
        return estimates

    # ------------------------------------------------------------------
    # Metrics
    # ------------------------------------------------------------------

    def _resource_values(self) -> Tuple[List[float], List[float], float, float]:
        cfg = self.config
        tick_s = cfg.tick_ms / 1000.0
        checkpoint_pct = cfg.cpu_checkpoint_pct if self._tick_checkpoint else 0.0
        cpu, heap = [], []
        for slots in self._worker_slots:
            processed = sum(self._tick_src[k] + self._tick_served[k] for k in slots)
            in_flight = processed + sum(len(self._queues[k]) for k in slots)
            state = sum(self._slot_state[k] for k in slots)
            cpu.append(_clamp_pct(cfg.cpu_base_pct + cfg.cpu_pct_per_msg_s * processed / tick_s + checkpoint_pct))
            heap_mb = cfg.heap_overhead_mb + cfg.heap_mb_per_record * in_flight + cfg.heap_mb_per_state_record * state
            heap.append(_clamp_pct(100.0 * heap_mb / cfg.heap_per_worker_mb))
        coordinator_cpu = _clamp_pct(cfg.coordinator_scale * (cfg.cpu_base_pct + checkpoint_pct))
        coordinator_heap = _clamp_pct(100.0 * cfg.coordinator_scale * cfg.heap_overhead_mb / cfg.heap_per_worker_mb)
        return cpu, heap, coordinator_cpu, coordinator_heap

    def sample_resources(self, t_ms: int) -> List[MetricPoint]:
        """CPU and heap of every worker and coordinator for the last completed tick"""
        cpu, heap, coordinator_cpu, coordinator_heap = self._resource_values()
        round_tag = str(self.round)
        points = []
        for w in range(self.config.worker_count):
            tags = {"round": round_tag, "worker": f"worker-{w}"}
            points.append(MetricPoint("cpu_pct", t_ms, cpu[w], dict(tags)))
            points.append(MetricPoint("heap_pct", t_ms, heap[w], dict(tags)))
        for c in range(self.config.coordinator_count):
            tags = {"round": round_tag, "worker": f"coordinator-{c}"}
            points.append(MetricPoint("cpu_pct", t_ms, coordinator_cpu, dict(tags)))
            points.append(MetricPoint("heap_pct", t_ms, coordinator_heap, dict(tags)))
        return points

    def _accumulate(self, t0: int, t1: int, fetched: int, markers):
        acc = self._acc
        acc.ticks += 1
        acc.fetched += fetched
        if markers is not None:
            acc.latency_sum += markers[1].mean(axis=1)
            acc.latency_ticks += 1
        acc.queue_sum += np.asarray(self.queue_lengths(), dtype=float)
        cpu, heap, coordinator_cpu, coordinator_heap = self._resource_values()
        acc.cpu_sum += np.asarray(cpu)
        acc.heap_sum += np.asarray(heap)
        acc.coordinator_cpu_sum += coordinator_cpu
        acc.coordinator_heap_sum += coordinator_heap

        interval = self.config.metric_interval_ms
        if (t1 - self._round_start_ms) % interval == 0:
            self._flush_interval(t1 - interval)

    def _flush_interval(self, ts: int):
        acc = self._acc
        cfg = self.config
        self._acc = _IntervalStats(cfg.parallelism, cfg.worker_count)
        if ts < self._metrics_from_ms or acc.ticks == 0:
            return
        round_tag = str(self.round)
        record = self.metrics.record
        record("input_throughput_msg_s", acc.fetched / (cfg.metric_interval_ms / 1000.0), ts, round=round_tag)
        for k in range(cfg.parallelism):
            if acc.latency_ticks:
                record("latency_ms", acc.latency_sum[k] / acc.latency_ticks, ts, round=round_tag, sink_index=str(k))
            record("queue_length", acc.queue_sum[k] / acc.ticks, ts, round=round_tag, operator=f"window-{k}")
        for w in range(cfg.worker_count):
            record("cpu_pct", acc.cpu_sum[w] / acc.ticks, ts, round=round_tag, worker=f"worker-{w}")
            record("heap_pct", acc.heap_sum[w] / acc.ticks, ts, round=round_tag, worker=f"worker-{w}")
        for c in range(cfg.coordinator_count):
            record("cpu_pct", acc.coordinator_cpu_sum / acc.ticks, ts, round=round_tag, worker=f"coordinator-{c}")
            record("heap_pct", acc.coordinator_heap_sum / acc.ticks, ts, round=round_tag, worker=f"coordinator-{c}")

    # ------------------------------------------------------------------
    # Shutdown
    # ------------------------------------------------------------------

    def finish(self) -> AdvanceResult:
        """Drain everything still queued and fire every open window"""
        out = AdvanceResult()
        for event_time, vehicle_type, partition in self._fetch(math.inf):
            self._queues[self.task_of(vehicle_type)].append((event_time, vehicle_type))
        length = self.config.window_length_ms
        for k, queue in enumerate(self._queues):
            windows = self._windows[k]
            drained = len(queue)
            while queue:
                event_time, vehicle_type = queue.popleft()
                start = event_time - event_time % length
                counts = windows.setdefault(start, {})
                counts[vehicle_type] = counts.get(vehicle_type, 0) + 1
            self._slot_state[k] += drained
            self._state_records += drained
        self._source_queue = [0.0] * self.config.parallelism
        results = self._fire_windows(self._clock, watermark=math.inf)
        self._emit(results)
        out.results = results
        self._settle(math.inf)
        if self.status != "failed":
            self.status = "stopped"
        logger.info(f"[{self.pipeline_id}] round {self.round} finished, {len(results)} results flushed")
        return out
