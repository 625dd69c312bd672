from concurrent.futures import ThreadPoolExecutor

import pytest

from app.core.exceptions import MetricsImportError
from app.services.metrics_store import MetricPoint, MetricsStore, RangeQuery, format_tags, parse_tags


def test_last_write_wins(metrics):
    metrics.append(MetricPoint("latency_ms", 1000, 5.0, {"pipeline_id": "a"}))
    metrics.append(MetricPoint("latency_ms", 1000, 7.0, {"pipeline_id": "a"}))
    points = metrics.query_range(RangeQuery("latency_ms", {"pipeline_id": "a"}))
    assert [p.value for p in points] == [7.0]


def test_range_is_half_open_and_ordered(metrics):
    for ts in (3000, 1000, 2000, 4000):
        metrics.append(MetricPoint("queue_length", ts, ts / 1000, {"operator": "window-1"}))
        metrics.append(MetricPoint("queue_length", ts, 0.0, {"operator": "window-0"}))
    points = metrics.query_range(RangeQuery("queue_length", {}, 1000, 3000))
    assert [(p.timestamp_ms, p.tags["operator"]) for p in points] == [
        (1000, "window-0"), (1000, "window-1"), (2000, "window-0"), (2000, "window-1"),
    ]


def test_query_filters_on_tag_subset(metrics):
    metrics.append(MetricPoint("cpu_pct", 0, 10.0, {"pipeline_id": "a", "worker": "worker-0"}))
    metrics.append(MetricPoint("cpu_pct", 0, 20.0, {"pipeline_id": "b", "worker": "worker-0"}))
    points = metrics.query_range(RangeQuery("cpu_pct", {"pipeline_id": "b"}))
    assert [p.value for p in points] == [20.0]
    assert metrics.tag_values("cpu_pct", "pipeline_id") == ["a", "b"]


def test_inverted_range_rejected():
    with pytest.raises(ValueError):
        RangeQuery("latency_ms", {}, 10, 5)


def test_tags_reject_separator_characters():
    assert format_tags({"b": "2", "a": "1"}) == "a=1;b=2"
    assert parse_tags("a=1;b=2") == {"a": "1", "b": "2"}
    with pytest.raises(ValueError):
        format_tags({"a": "x;y"})


def test_view_stamps_and_isolates_pipelines(metrics):
    a, b = metrics.view("a"), metrics.view("b")
    a.record("latency_ms", 4.0, 0, sink_index="0")
    b.record("latency_ms", 9.0, 0, sink_index="0")
    assert [p.value for p in a.query("latency_ms")] == [4.0]
    assert a.query("latency_ms")[0].tags == {"pipeline_id": "a", "sink_index": "0"}
    assert metrics.count("latency_ms") == 2


def test_csv_export_import_preserves_points(metrics, tmp_path):
    view = metrics.view("p")
    for ts in range(0, 5000, 1000):
        view.record("latency_ms", ts / 3.0, ts, round="1", sink_index="0")
        view.record("input_throughput_msg_s", 12.5, ts, round="1")
    path = str(tmp_path / "metrics" / "p.csv")
    assert view.export_csv(path) == 10

    restored = MetricsStore()
    assert restored.import_csv(path) == 10
    assert restored.points() == metrics.points()


def test_import_reports_bad_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "series,timestamp_ms,value,tags\n"
        "latency_ms,0,1.0,pipeline_id=a\n"
        "latency_ms,1000,2.0,pipeline_id=a\n"
        "latency_ms,2000,not-a-number,pipeline_id=a\n"
    )
    store = MetricsStore()
    with pytest.raises(MetricsImportError) as excinfo:
        store.import_csv(str(path))
    assert excinfo.value.row == 3
    assert store.count() == 0


def test_import_requires_header(tmp_path):
    path = tmp_path / "noheader.csv"
    path.write_text("latency_ms,0,1.0,pipeline_id=a\n")
    with pytest.raises(MetricsImportError) as excinfo:
        MetricsStore().import_csv(str(path))
    assert excinfo.value.row == 0


def test_concurrent_appends_from_three_pipelines(metrics):
    def write(pipeline_id, first, n):
        view = metrics.view(pipeline_id)
        for i in range(first, first + n):
            view.record("latency_ms", float(i % 97), i, round="1", sink_index=str(i % 8))

    # three pipelines, two writer threads each, disjoint timestamps per writer
    jobs = [("a", 0, 20000), ("a", 20000, 20000), ("b", 0, 15000), ("b", 15000, 15000),
            ("c", 0, 15000), ("c", 15000, 15000)]
    with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
        for future in [pool.submit(write, *job) for job in jobs]:
            future.result()

    assert metrics.count("latency_ms") == 100000
    assert metrics.count("latency_ms", {"pipeline_id": "a"}) == 40000
    assert metrics.series_names() == ["latency_ms"]
    assert len(metrics.view("b").query("latency_ms", sink_index="3")) == 3750
