import random
from collections import Counter

import pytest

from app.core.exceptions import ClockRegressionError, PipelineFatalError
from app.models.schemas import ConfigSet, LoadModel
from app.services.workload_generator import generate_trace
from conftest import make_pipeline, publish_constant, publish_messages

FLOOR_MS = 6.0


def oracle_counts(messages, window_ms):
    return Counter((m.event_time_ms - m.event_time_ms % window_ms, m.vehicle_type) for m in messages)


def result_counts(store):
    records = store.records()
    counts = {(r.window_start_ms, r.vehicle_type): r.count for r in records}
    assert len(counts) == len(records), "a window was emitted with two different counts"
    return counts


@pytest.fixture
def trace():
    return list(generate_trace(LoadModel(v_min=1, v_max=2, period_s=600), 600, seed=21))


@pytest.fixture
def four_workers():
    return ConfigSet(parallelism=4, worker_count=4, window_length_ms=60000, checkpoint_interval_ms=10000)


def test_counts_match_oracle_without_failures(bus, metrics, trace, four_workers):
    bus.create_topic("in", 2)
    publish_messages(bus, "in", trace)
    pipeline = make_pipeline(bus, metrics, four_workers)
    pipeline.start_round(1, "in")
    pipeline.advance(600000)
    pipeline.finish()

    assert result_counts(pipeline.store) == dict(oracle_counts(trace, 60000))
    for record in pipeline.store.records():
        assert record.emit_time_ms >= record.window_end_ms
        assert record.round == 1
    assert bus.total_records(pipeline.spec.output_topic) >= len(pipeline.store)


def test_counts_match_oracle_after_worker_kills(bus, metrics, trace, four_workers):
    bus.create_topic("in", 2)
    publish_messages(bus, "in", trace)
    pipeline = make_pipeline(bus, metrics, four_workers)
    pipeline.start_round(1, "in")
    pipeline.advance(125000)
    pipeline.fail_and_recover(125000, worker=0)
    pipeline.advance(300000)
    pipeline.fail_and_recover(300000, worker=1)
    pipeline.advance(600000)
    pipeline.finish()

    assert result_counts(pipeline.store) == dict(oracle_counts(trace, 60000))
    assert len(pipeline.recoveries) == 2


def test_backlog_is_input_since_last_checkpoint(bus, metrics, trace, four_workers):
    bus.create_topic("in", 2)
    publish_messages(bus, "in", trace)
    pipeline = make_pipeline(bus, metrics, four_workers)
    pipeline.start_round(1, "in")
    pipeline.advance(125000)
    report = pipeline.fail_and_recover(125000, worker=0)

    expected = sum(1 for m in trace if 120000 <= m.event_time_ms < 125000)
    assert report.backlog_records == expected
    assert pipeline.last_completed_checkpoint.trigger_time_ms == 120000
    assert report.recovery_time_ms == pytest.approx(
        report.downtime_ms + expected / four_workers.recovery_rate_msg_s * 1000.0
    )
    assert pipeline.is_worker_down(0, 126000)
    assert not pipeline.is_worker_down(1, 126000)


def test_input_hash_ignores_replay(bus, metrics, trace, four_workers):
    bus.create_topic("in", 2)
    publish_messages(bus, "in", trace)
    steady = make_pipeline(bus, metrics, four_workers, "steady")
    killed = make_pipeline(bus, metrics, ConfigSet(parallelism=2, worker_count=2), "killed")
    for pipeline in (steady, killed):
        pipeline.start_round(1, "in")
    steady.advance(600000)
    killed.advance(200000)
    killed.fail_and_recover(200000, worker=0)
    killed.advance(600000)
    steady.finish()
    killed.finish()
    assert steady.input_hash() == killed.input_hash()


def test_checkpoint_every_interval(bus, metrics):
    bus.create_topic("in", 1)
    pipeline = make_pipeline(bus, metrics, ConfigSet(parallelism=1, worker_count=1, checkpoint_interval_ms=1000))
    pipeline.start_round(1, "in")
    result = pipeline.advance(10000)
    assert pipeline.checkpoints_taken == 10
    assert [c.trigger_time_ms for c in result.checkpoints] == list(range(0, 10000, 1000))
    assert pipeline.missed_checkpoints == 0


def test_trigger_during_pending_checkpoint_is_missed(bus, metrics):
    bus.create_topic("in", 1)
    config = ConfigSet(parallelism=1, worker_count=1, checkpoint_interval_ms=1000, checkpoint_base_ms=1500)
    pipeline = make_pipeline(bus, metrics, config)
    pipeline.start_round(1, "in")
    pipeline.advance(10000)
    assert pipeline.checkpoints_taken == 5
    assert pipeline.missed_checkpoints == 5
    assert len(metrics.view("p").query("checkpoint_missed")) == 5
    assert pipeline.cumulative_stall_ms == pytest.approx(5 * 1500.0)


def test_idle_latency_is_hop_floor(bus, metrics, four_workers):
    bus.create_topic("in", 1)
    pipeline = make_pipeline(bus, metrics, four_workers)
    pipeline.start_round(1, "in")
    pipeline.advance(5000)
    samples = pipeline.emit_latency_markers()
    assert len(samples) == 4 * 10
    assert {s.latency_ms for s in samples} == {FLOOR_MS}


def test_pause_delays_markers_on_paused_worker(bus, metrics):
    config = ConfigSet(parallelism=4, worker_count=4)
    bus.create_topic("in", 1)
    pipeline = make_pipeline(bus, metrics, config)
    pipeline.start_round(1, "in")
    pipeline.advance(5000)
    pipeline.pause_worker(0, 5000, 10000)
    samples = pipeline.emit_latency_markers(5000, 6000)

    paused = [s for s in samples if s.sink_index == 0]
    others = [s for s in samples if s.sink_index != 0]
    assert paused[0].marker_source_time_ms == 5000.0
    assert paused[0].latency_ms >= FLOOR_MS + 10000
    assert all(s.sink_arrival_time_ms >= 15000 for s in paused)
    assert {s.latency_ms for s in others} == {FLOOR_MS}


def test_queue_grows_while_worker_paused(bus, metrics):
    config = ConfigSet(parallelism=4, worker_count=4)
    bus.create_topic("in", 1)
    publish_constant(bus, "in", rate=3, seconds=60)
    pipeline = make_pipeline(bus, metrics, config)
    task = pipeline.task_of("car")
    worker = task % config.worker_count
    pipeline.start_round(1, "in")
    pipeline.advance(20000)
    pipeline.pause_worker(worker, 20000, 10000)
    pipeline.advance(40000)

    queue = {p.timestamp_ms: p.value for p in metrics.view("p").query("queue_length", operator=f"window-{task}")}
    assert queue[19000] == 0.0
    during = [queue[ts] for ts in range(20000, 30000, 1000)]
    assert all(b > a for a, b in zip(during, during[1:]))
    assert queue[30000] < queue[29000]


def test_slowdown_raises_latency(bus, metrics):
    config = ConfigSet(parallelism=1, worker_count=1)
    bus.create_topic("in", 1)
    publish_constant(bus, "in", rate=20, seconds=30)
    pipeline = make_pipeline(bus, metrics, config)
    pipeline.start_round(1, "in")
    pipeline.advance(10000)
    pipeline.slow_worker(0, 4.0, 10000, 10000)
    pipeline.advance(20000)

    latency = {p.timestamp_ms: p.value for p in metrics.view("p").query("latency_ms", sink_index="0")}
    before = sum(latency[ts] for ts in range(5000, 10000, 1000)) / 5
    during = sum(latency[ts] for ts in range(15000, 20000, 1000)) / 5
    assert during > before >= FLOOR_MS


def test_longer_interval_means_longer_recovery(bus, metrics):
    bus.create_topic("in", 1)
    publish_constant(bus, "in", rate=10, seconds=240)
    reports = []
    for interval in (1000, 20000, 120000):
        config = ConfigSet(parallelism=1, worker_count=1, checkpoint_interval_ms=interval)
        pipeline = make_pipeline(bus, metrics, config, f"cp-{interval}")
        pipeline.start_round(1, "in")
        pipeline.advance(239000)
        reports.append(pipeline.fail_and_recover(239000, worker=0))

    assert [r.backlog_records for r in reports] == [10, 190, 1190]
    times = [r.recovery_time_ms for r in reports]
    assert times[0] < times[1] < times[2]


def test_estimated_backlog_grows_with_interval(bus, metrics):
    bus.create_topic("in", 1)
    publish_constant(bus, "in", rate=10, seconds=240)
    rng = random.Random(0)
    failure_times = [rng.uniform(1000, 240000) for _ in range(500)]
    means = []
    for interval in (1000, 20000, 120000):
        config = ConfigSet(parallelism=1, worker_count=1, checkpoint_interval_ms=interval)
        pipeline = make_pipeline(bus, metrics, config, f"cp-{interval}")
        pipeline.start_round(1, "in")
        pipeline.advance(240000)
        estimates = pipeline.estimate_backlog(failure_times)
        means.append(sum(estimates) / len(estimates))
    assert means[0] < means[1] < means[2]


def test_failure_during_recovery_is_nested(bus, metrics, four_workers):
    bus.create_topic("in", 1)
    publish_constant(bus, "in", rate=5, seconds=30)
    pipeline = make_pipeline(bus, metrics, four_workers)
    pipeline.start_round(1, "in")
    pipeline.advance(25000)
    first = pipeline.fail_and_recover(25000, worker=0)
    second = pipeline.fail_and_recover(25500, worker=1)
    assert not first.nested
    assert second.nested
    assert pipeline.nested_recoveries == 1
    assert pipeline.is_recovering(26000)


def test_restart_limit_is_fatal(bus, metrics):
    bus.create_topic("in", 1)
    config = ConfigSet(parallelism=1, worker_count=1, max_restarts=1)
    pipeline = make_pipeline(bus, metrics, config)
    pipeline.start_round(1, "in")
    pipeline.advance(5000)
    pipeline.fail_and_recover(5000, worker=0)
    with pytest.raises(PipelineFatalError):
        pipeline.fail_and_recover(5000, worker=0)
    assert pipeline.status == "failed"
    with pytest.raises(PipelineFatalError):
        pipeline.advance(10000)


def test_clock_cannot_move_back(bus, metrics, four_workers):
    bus.create_topic("in", 1)
    pipeline = make_pipeline(bus, metrics, four_workers)
    pipeline.start_round(1, "in")
    pipeline.advance(5000)
    with pytest.raises(ClockRegressionError):
        pipeline.advance(4000)


def test_cpu_follows_processed_rate(bus, metrics):
    config = ConfigSet(parallelism=1, worker_count=1)
    samples = {}
    for rate in (4, 8):
        topic = f"in-{rate}"
        bus.create_topic(topic, 1)
        publish_constant(bus, topic, rate=rate, seconds=20)
        pipeline = make_pipeline(bus, metrics, config, f"rate-{rate}")
        pipeline.start_round(1, topic)
        pipeline.advance(10000)
        samples[rate] = {(p.series, p.tags["worker"]): p.value for p in pipeline.sample_resources(10000)}

    cpu_4 = samples[4][("cpu_pct", "worker-0")]
    cpu_8 = samples[8][("cpu_pct", "worker-0")]
    assert cpu_4 == pytest.approx(config.cpu_base_pct + config.cpu_pct_per_msg_s * 8)
    assert cpu_8 - cpu_4 == pytest.approx(config.cpu_pct_per_msg_s * 8)
    assert samples[8][("heap_pct", "worker-0")] > samples[4][("heap_pct", "worker-0")]
    assert samples[4][("cpu_pct", "coordinator-0")] == pytest.approx(config.coordinator_scale * config.cpu_base_pct)


def test_metrics_carry_round_and_operator_tags(bus, metrics):
    config = ConfigSet(parallelism=2, worker_count=2)
    bus.create_topic("in", 1)
    publish_constant(bus, "in", rate=6, seconds=10)
    pipeline = make_pipeline(bus, metrics, config)
    pipeline.start_round(3, "in")
    pipeline.advance(10000)

    view = metrics.view("p")
    throughput = view.query("input_throughput_msg_s", round="3")
    assert [p.value for p in throughput] == [6.0] * 10
    assert metrics.tag_values("latency_ms", "sink_index") == ["0", "1"]
    assert metrics.tag_values("queue_length", "operator") == ["window-0", "window-1"]
    assert metrics.tag_values("cpu_pct", "worker") == ["coordinator-0", "worker-0", "worker-1"]
