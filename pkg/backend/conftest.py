import copy
import logging
from typing import Any, Dict, List, Optional

import pytest

from app.models.schemas import ConfigSet, ExperimentPlan
from app.services.metrics_store import MetricsStore
from app.services.pipeline_engine import PipelineSpec, StreamPipeline
from app.services.result_store import ResultStore
from app.services.stream_bus import StreamBus

logging.basicConfig(level=logging.WARNING)

SMALL_CONFIG = {
    "parallelism": 2,
    "worker_count": 2,
    "window_length_ms": 30000,
    "metric_interval_ms": 5000,
    "checkpoint_interval_ms": 10000,
}

TINY_PLAN: Dict[str, Any] = {
    "version": 1,
    "experiment_id": "tiny",
    "seed": 3,
    "scale_factor": 0.0002,
    "rounds": 2,
    "round_duration_s": 120,
    "epoch_s": 30,
    "workload": {"period_s": 240, "input_partitions": 2},
    "production": dict(SMALL_CONFIG),
    "variants": [
        {"name": "fast", "config": dict(SMALL_CONFIG, checkpoint_interval_ms=1000)},
        {"name": "slow", "config": dict(SMALL_CONFIG, checkpoint_interval_ms=60000)},
    ],
    "scenario": {
        "name": "kill",
        "events": [{"at_ms": 60000, "kind": "worker_kill", "target": 0}],
    },
    "qos": {"max_latency_ms": 10000},
    "analysis": {"ewma_span_s": 10},
}


def payload(vehicle_id: str, vehicle_type: str, t_s: int) -> bytes:
    return f"{vehicle_id},{vehicle_type},52.520008,13.404954,10.00,90.00,{t_s * 1000}".encode("utf-8")


def publish_constant(bus: StreamBus, topic: str, rate: int, seconds: int, vehicle_type: str = "car",
                     start_s: int = 0) -> int:
    """rate records per simulated second, each with its own key"""
    count = 0
    for t in range(start_s, start_s + seconds):
        for i in range(rate):
            vehicle_id = f"v-{i:07d}"
            bus.publish(topic, vehicle_id.encode("utf-8"), payload(vehicle_id, vehicle_type, t), t * 1000)
            count += 1
    return count


def publish_messages(bus: StreamBus, topic: str, messages) -> int:
    count = 0
    for message in messages:
        bus.publish(topic, message.vehicle_id.encode("utf-8"), message.to_line().encode("utf-8"),
                    message.event_time_ms)
        count += 1
    return count


def make_pipeline(bus: StreamBus, metrics: MetricsStore, config: ConfigSet,
                  pipeline_id: str = "p") -> StreamPipeline:
    spec = PipelineSpec(pipeline_id, config, namespace=pipeline_id)
    return StreamPipeline(spec, bus, ResultStore(pipeline_id), metrics.view(pipeline_id))


def tiny_plan_data(**changes: Any) -> Dict[str, Any]:
    data = copy.deepcopy(TINY_PLAN)
    data.update(changes)
    return data


@pytest.fixture
def bus() -> StreamBus:
    return StreamBus()


@pytest.fixture
def metrics() -> MetricsStore:
    return MetricsStore()


@pytest.fixture
def small_config() -> ConfigSet:
    return ConfigSet(**SMALL_CONFIG)


@pytest.fixture
def tiny_plan() -> ExperimentPlan:
    return ExperimentPlan.model_validate(tiny_plan_data())
