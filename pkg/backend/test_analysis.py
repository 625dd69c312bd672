import math

import numpy as np
import pytest

from app.models.schemas import AnalysisOptions, ExperimentPlan, Objective, QoSTarget
from app.services.analysis import (
    AggregatedSeries,
    VariantSeries,
    analyze_store,
    compare,
    ewma,
    median_across_replicas,
    median_across_rounds,
    replica_median_series,
    significance,
)
from app.services.metrics_store import MetricPoint, MetricsStore

ROUND_STAGES = ["raw", "sink_median", "round_median"]


def series(values, name="latency_ms", variant="v", step_ms=1000, provenance=None):
    return AggregatedSeries(
        name=name,
        variant=variant,
        timestamps=[i * step_ms for i in range(len(values))],
        values=[float(v) for v in values],
        provenance=list(provenance or ROUND_STAGES),
        counts=[1] * len(values),
    )


def variant(name, latency, role="testing", recoveries=(), failed=False, cpu=None):
    out = VariantSeries(name=name, role=role, failed=failed, rounds_completed=0 if failed else 1,
                        recovery_times=list(recoveries))
    if latency is not None:
        out.round_medians["latency_ms"] = series(latency, variant=name)
        out.smoothed["latency_ms"] = ewma(out.round_medians["latency_ms"], 1.0)
    if cpu is not None:
        out.round_medians["cpu_pct"] = series(cpu, name="cpu_pct", variant=name)
        out.smoothed["cpu_pct"] = ewma(out.round_medians["cpu_pct"], 1.0)
    return out


def noisy(center, seed, n=50, scale=2.0):
    return list(center + np.random.default_rng(seed).normal(0.0, scale, n))


# ----------------------------------------------------------------------
# Aggregation
# ----------------------------------------------------------------------

def test_replica_median():
    assert median_across_replicas([1, 2, 3]) == 2.0
    assert median_across_replicas([5, 7]) == 6.0
    assert median_across_replicas([3, 1, 2]) == median_across_replicas([2, 3, 1])
    with pytest.raises(ValueError):
        median_across_replicas([])


def test_round_median_skips_missing_rounds():
    rounds = [series([10, 1]), series([11]), series([12, 3]), series([13, 4]), series([14, 5])]
    combined = median_across_rounds(rounds)
    assert combined.values == [12.0, 3.5]
    assert combined.counts == [5, 4]


def test_round_median_marks_gaps():
    combined = median_across_rounds([series([1, 2]), series([3])], timesteps=[0, 1000, 2000])
    assert combined.timestamps == [0, 1000]
    assert combined.gaps == [2000]


def test_sinks_before_rounds():
    matrix = [[1, 2, 3], [4, 5, 6], [7, 8, 0]]
    per_round = []
    for r, row in enumerate(matrix):
        points = [MetricPoint("latency_ms", 0, v, {"sink_index": str(k), "round": str(r + 1)})
                  for k, v in enumerate(row)]
        per_round.append(replica_median_series(points, "latency_ms", "v"))
    combined = median_across_rounds(per_round)
    assert combined.values == [5.0]
    assert combined.provenance == ROUND_STAGES
    columns_first = float(np.median([np.median(col) for col in zip(*matrix)]))
    assert combined.values[0] != columns_first


def test_ewma_constant_is_fixed_point():
    smoothed = ewma(series([7.5] * 20), span_s=10)
    assert smoothed.values == [7.5] * 20
    assert smoothed.provenance == ROUND_STAGES + ["ewma"]


def test_ewma_span_one_is_identity():
    raw = series([3, 9, 1, 4])
    assert ewma(raw, span_s=1).values == raw.values


def test_ewma_matches_recurrence_and_stays_bounded():
    values = noisy(50.0, seed=4, n=200, scale=20.0)
    span = 30.0
    smoothed = ewma(series(values), span_s=span).values
    alpha = 2.0 / (span + 1.0)
    expected = [values[0]]
    for x in values[1:]:
        expected.append(alpha * x + (1 - alpha) * expected[-1])
    assert smoothed == pytest.approx(expected, abs=1e-9)
    assert all(min(values) <= y <= max(values) for y in smoothed)


def test_ewma_span_counts_in_steps():
    smoothed = ewma(series([0, 3], step_ms=5000), span_s=10, step_s=5.0)
    assert smoothed.values == pytest.approx([0.0, 2.0])


def test_ewma_rejects_empty():
    with pytest.raises(ValueError):
        ewma(series([]), span_s=10)


# ----------------------------------------------------------------------
# Significance and comparison
# ----------------------------------------------------------------------

def test_significance_degenerate_inputs():
    a = np.asarray([1.0, 2.0, 3.0])
    assert significance(a, np.asarray([])) == 1.0
    assert significance(a, a.copy()) == 1.0
    assert significance(np.full(5, 4.0), np.full(6, 4.0)) == 1.0


def test_identical_distributions_rarely_significant():
    quiet = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        if significance(rng.normal(100, 10, 60), rng.normal(100, 10, 60)) > 0.05:
            quiet += 1
    assert quiet >= 45


def test_large_latency_offset_always_detected():
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        base = rng.normal(100, 10, 60)
        shifted = rng.normal(150, 15, 60)
        assert significance(base, shifted) < 0.05


def test_significantly_better_variant_wins():
    variants = {
        "production": variant("production", noisy(100.0, 1), role="production"),
        "fast": variant("fast", noisy(50.0, 2)),
    }
    report = compare(variants, QoSTarget(max_latency_ms=500), AnalysisOptions(), "production")
    assert report.ranking == ["fast", "production"]
    assert report.winner == "fast"
    assert report.significance["fast"]["production"] < 0.05
    assert report.significance["production"]["fast"] == report.significance["fast"]["production"]


def test_identical_variant_does_not_win():
    values = noisy(100.0, 3)
    variants = {
        "production": variant("production", values, role="production"),
        "same": variant("same", list(values)),
    }
    report = compare(variants, QoSTarget(), AnalysisOptions(), "production")
    assert report.significance["same"]["production"] == 1.0
    assert report.winner is None


def test_qos_violation_eliminates_variant():
    variants = {
        "production": variant("production", noisy(100.0, 5), role="production"),
        "slow": variant("slow", noisy(300.0, 6)),
    }
    report = compare(variants, QoSTarget(max_latency_ms=200), AnalysisOptions(), "production")
    assert report.ranking == ["production"]
    assert report.variant("slow").qos_passed is False
    assert report.variant("slow").qos[0].observed > 200
    assert report.winner is None


def test_no_survivor_still_reports():
    variants = {
        "production": variant("production", noisy(300.0, 7), role="production"),
        "slow": variant("slow", noisy(400.0, 8)),
    }
    report = compare(variants, QoSTarget(max_latency_ms=100), AnalysisOptions(), "production")
    assert report.ranking == []
    assert report.winner is None
    assert len(report.variants) == 2


def test_failed_variant_is_excluded():
    variants = {
        "production": variant("production", noisy(100.0, 9), role="production"),
        "broken": variant("broken", noisy(10.0, 10), failed=True),
    }
    report = compare(variants, QoSTarget(), AnalysisOptions(), "production")
    assert report.failed_variants == ["broken"]
    assert "broken" not in report.ranking
    assert "broken" not in report.significance
    assert report.winner is None


def test_worse_latency_never_improves_rank():
    def ranking_with(x_center):
        variants = {
            "production": variant("production", noisy(60.0, 11), role="production"),
            "a": variant("a", noisy(40.0, 12)),
            "x": variant("x", noisy(x_center, 13)),
        }
        return compare(variants, QoSTarget(), AnalysisOptions(), "production").ranking

    assert ranking_with(50.0).index("x") <= ranking_with(70.0).index("x")
    assert ranking_with(70.0) == ["a", "production", "x"]


def test_recovery_median_breaks_latency_ties():
    variants = {
        "production": variant("production", [50.0] * 10, role="production", recoveries=[5000.0]),
        "b": variant("b", [50.0] * 10, recoveries=[3000.0]),
    }
    report = compare(variants, QoSTarget(), AnalysisOptions(), "production")
    assert report.ranking == ["b", "production"]
    assert report.winner is None


def test_recovery_objective_uses_recovery_samples():
    variants = {
        "production": variant("production", None, role="production", recoveries=[3000.0 + i for i in range(10)]),
        "quick": variant("quick", None, recoveries=[2000.0 + i for i in range(10)]),
    }
    options = AnalysisOptions(objective=Objective.RECOVERY_TIME)
    report = compare(variants, QoSTarget(max_recovery_time_ms=4000), options, "production")
    assert report.ranking == ["quick", "production"]
    assert report.winner == "quick"
    assert report.variant("quick").stats["recovery_median_ms"] == pytest.approx(2004.5)


def test_recovery_target_passes_without_failures():
    variants = {"production": variant("production", [10.0] * 5, role="production")}
    report = compare(variants, QoSTarget(max_recovery_time_ms=1000), AnalysisOptions(), "production")
    verdict = report.variant("production").qos[0]
    assert verdict.passed and verdict.observed is None


def test_evaluation_window_limits_samples():
    fast = variant("fast", [500.0] * 10 + [10.0] * 10)
    production = variant("production", [20.0] * 20, role="production")
    qos = QoSTarget.model_validate({"evaluation_window": {"from_ms": 10000}})
    report = compare({"fast": fast, "production": production}, qos, AnalysisOptions(), "production")
    assert report.variant("fast").stats["latency_ms"] == 10.0
    assert report.ranking[0] == "fast"
    assert report.tradeoff_note.startswith("lowest latency: fast")


# ----------------------------------------------------------------------
# Store entry point
# ----------------------------------------------------------------------

def test_analyze_store_runs_full_chain():
    store = MetricsStore()
    for pipeline_id, offset in (("production", 100.0), ("v1", 40.0)):
        view = store.view(pipeline_id)
        for round_no in ("1", "2"):
            for ts in range(0, 10000, 1000):
                for sink in ("0", "1"):
                    view.record("latency_ms", offset + ts / 1000, ts, round=round_no, sink_index=sink)
                view.record("cpu_pct", 10.0, ts, round=round_no, worker="worker-0")
                view.record("cpu_pct", 20.0, ts, round=round_no, worker="worker-1")
                view.record("cpu_pct", 99.0, ts, round=round_no, worker="coordinator-0")
        view.record("recovery_time_ms", 2500.0, 5000, round="1")

    plan = ExperimentPlan.model_validate({
        "experiment_id": "synthetic",
        "variants": [{"name": "v1"}],
        "analysis": {"ewma_span_s": 1},
    })
    report, series_by_variant = analyze_store(store, plan, {"production": "production", "v1": "testing"})

    v1 = series_by_variant["v1"]
    assert v1.smoothed["latency_ms"].provenance == ["raw", "sink_median", "round_median", "ewma"]
    assert v1.round_medians["latency_ms"].values[:3] == [40.0, 41.0, 42.0]
    assert v1.round_medians["cpu_pct"].provenance == ["raw", "worker_median", "round_median"]
    assert v1.round_medians["cpu_pct"].values[0] == 15.0
    assert v1.recovery_times == [2500.0]
    assert report.baseline == "production"
    assert report.ranking == ["v1", "production"]
    assert report.winner == "v1"
    assert math.isclose(report.variant("v1").stats["cpu_pct"], 15.0)
