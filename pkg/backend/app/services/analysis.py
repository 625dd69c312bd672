import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import mannwhitneyu

from ..models.schemas import (
    AnalysisOptions,
    ComparisonReport,
    ExperimentPlan,
    Objective,
    QoSTarget,
    QoSVerdict,
    VariantSummary,
)
from .metrics_store import MetricPoint, MetricsStore, RangeQuery

logger = logging.getLogger(__name__)

# series name -> tag that distinguishes replicas of one measurement
REPLICA_TAGS = {
    "latency_ms": "sink_index",
    "cpu_pct": "worker",
    "heap_pct": "worker",
    "input_throughput_msg_s": None,
}


@dataclass
class AggregatedSeries:
    name: str
    variant: str
    timestamps: List[int] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    provenance: List[str] = field(default_factory=lambda: ["raw"])
    counts: List[int] = field(default_factory=list)
    gaps: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def stage(self) -> str:
        return self.provenance[-1]

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def window(self, from_ms: float, to_ms: float) -> np.ndarray:
        ts = np.asarray(self.timestamps, dtype=float)
        mask = (ts >= from_ms) & (ts < to_ms)
        return self.array()[mask] if len(ts) else np.asarray([], dtype=float)


@dataclass
class VariantSeries:
    name: str
    role: str
    failed: bool = False
    rounds_completed: int = 0
    step_s: float = 1.0
    round_medians: Dict[str, AggregatedSeries] = field(default_factory=dict)
    smoothed: Dict[str, AggregatedSeries] = field(default_factory=dict)
    recovery_times: List[float] = field(default_factory=list)


def median_across_replicas(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("cannot take the median of an empty replica group")
    return float(np.median(np.asarray(values, dtype=float)))


def replica_median_series(
    points: Iterable[MetricPoint], name: str, variant: str, stage: str = "sink_median"
) -> AggregatedSeries:
    """Per timestamp, median over every replica that reported"""
    grouped: Dict[int, List[float]] = defaultdict(list)
    for point in points:
        grouped[point.timestamp_ms].append(point.value)
    series = AggregatedSeries(name=name, variant=variant, provenance=["raw", stage])
    for ts in sorted(grouped):
        series.timestamps.append(ts)
        series.values.append(median_across_replicas(grouped[ts]))
        series.counts.append(len(grouped[ts]))
    return series


def median_across_rounds(
    rounds: Sequence[AggregatedSeries],
    timesteps: Optional[Sequence[int]] = None,
) -> AggregatedSeries:
    """
    Per timestep, median over rounds that have a value there. A timestep where no
    round has a value becomes a gap: it is listed in `gaps` and left out of the output.
    """
    if not rounds:
        raise ValueError("no rounds to aggregate")
    grid = sorted(set(timesteps) if timesteps is not None else {ts for s in rounds for ts in s.timestamps})
    lookups = [dict(zip(s.timestamps, s.values)) for s in rounds]
    out = AggregatedSeries(
        name=rounds[0].name,
        variant=rounds[0].variant,
        provenance=list(rounds[0].provenance) + ["round_median"],
    )
    for ts in grid:
        present = [lookup[ts] for lookup in lookups if ts in lookup and not math.isnan(lookup[ts])]
        if not present:
            out.gaps.append(ts)
            continue
        out.timestamps.append(ts)
        out.values.append(median_across_replicas(present))
        out.counts.append(len(present))
    return out


def ewma(series: AggregatedSeries, span_s: float, step_s: float = 1.0) -> AggregatedSeries:
    """Exponentially weighted moving average with alpha = 2 / (span / step + 1)"""
    if len(series) == 0:
        raise ValueError(f"cannot smooth empty series {series.name}")
    if span_s < 1 or step_s <= 0:
        raise ValueError(f"invalid smoothing span {span_s} s with step {step_s} s")
    alpha = 2.0 / (span_s / step_s + 1.0)
    out = AggregatedSeries(
        name=series.name,
        variant=series.variant,
        timestamps=list(series.timestamps),
        provenance=list(series.provenance) + ["ewma"],
        counts=list(series.counts),
        gaps=list(series.gaps),
    )
    if alpha >= 1.0:
        out.values = list(series.values)
        return out
    smoothed = series.values[0]
    out.values.append(smoothed)
    for x in series.values[1:]:
        y = smoothed + alpha * (x - smoothed)
        # keep y between the previous estimate and the new sample despite rounding
        smoothed = min(max(y, min(x, smoothed)), max(x, smoothed))
        out.values.append(smoothed)
    return out


# ----------------------------------------------------------------------
# Comparison
# ----------------------------------------------------------------------

def _objective_key(objective: Objective, stats: Mapping[str, Optional[float]]) -> float:
    if objective == Objective.THROUGHPUT:
        value = stats.get("throughput_msg_s")
        return -value if value is not None else math.inf
    if objective == Objective.RECOVERY_TIME:
        value = stats.get("recovery_median_ms")
        return value if value is not None else 0.0
    value = stats.get("latency_ms")
    return value if value is not None else math.inf


def _mean(values: np.ndarray) -> Optional[float]:
    return float(np.mean(values)) if values.size else None


def _variant_stats(series: VariantSeries, qos: QoSTarget, from_ms: float, to_ms: float) -> Dict[str, Optional[float]]:
    stats: Dict[str, Optional[float]] = {}
    latency = series.smoothed.get("latency_ms")
    values = latency.window(from_ms, to_ms) if latency is not None else np.asarray([])
    stats["latency_ms"] = float(np.percentile(values, qos.latency_percentile)) if values.size else None

    throughput = series.round_medians.get("input_throughput_msg_s")
    stats["throughput_msg_s"] = _mean(throughput.window(from_ms, to_ms)) if throughput is not None else None

    for name in ("cpu_pct", "heap_pct"):
        smoothed = series.smoothed.get(name)
        stats[name] = _mean(smoothed.window(from_ms, to_ms)) if smoothed is not None else None
    cpu = series.round_medians.get("cpu_pct")
    if cpu is not None and len(cpu):
        stats["cpu_pct_s"] = float(np.sum(cpu.window(from_ms, to_ms)) * series.step_s)
    else:
        stats["cpu_pct_s"] = None

    recoveries = np.asarray(series.recovery_times, dtype=float)
    stats["recoveries"] = float(recoveries.size)
    stats["recovery_median_ms"] = float(np.median(recoveries)) if recoveries.size else None
    stats["recovery_max_ms"] = float(np.max(recoveries)) if recoveries.size else None
    return stats


def _qos_verdicts(stats: Mapping[str, Optional[float]], qos: QoSTarget) -> List[QoSVerdict]:
    verdicts = []
    if qos.max_latency_ms is not None:
        observed = stats.get("latency_ms")
        verdicts.append(QoSVerdict(
            target=f"latency_p{qos.latency_percentile:g}_ms", threshold=qos.max_latency_ms,
            observed=observed, passed=observed is not None and observed <= qos.max_latency_ms,
        ))
    if qos.min_throughput_msg_s is not None:
        observed = stats.get("throughput_msg_s")
        verdicts.append(QoSVerdict(
            target="throughput_msg_s", threshold=qos.min_throughput_msg_s,
            observed=observed, passed=observed is not None and observed >= qos.min_throughput_msg_s,
        ))
    if qos.max_recovery_time_ms is not None:
        observed = stats.get("recovery_max_ms")
        # no failure observed means no recovery bound was violated
        verdicts.append(QoSVerdict(
            target="recovery_time_ms", threshold=qos.max_recovery_time_ms,
            observed=observed, passed=observed is None or observed <= qos.max_recovery_time_ms,
        ))
    return verdicts


def significance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided Mann-Whitney U p-value; 1.0 when the samples cannot be told apart"""
    if a.size == 0 or b.size == 0:
        return 1.0
    if a.size == b.size and np.array_equal(np.sort(a), np.sort(b)):
        return 1.0
    if np.unique(np.concatenate([a, b])).size == 1:
        return 1.0
    p = float(mannwhitneyu(a, b, alternative="two-sided").pvalue)
    return 1.0 if math.isnan(p) else p


def _tradeoff_note(summaries: List[VariantSummary]) -> str:
    alive = [s for s in summaries if not s.failed]
    if not alive:
        return "no variant completed the experiment"
    parts = []
    with_latency = [s for s in alive if s.stats.get("latency_ms") is not None]
    if with_latency:
        best = min(with_latency, key=lambda s: (s.stats["latency_ms"], s.name))
        parts.append(f"lowest latency: {best.name} ({best.stats['latency_ms']:.3f} ms)")
    with_recovery = [s for s in alive if s.stats.get("recovery_median_ms") is not None]
    if with_recovery:
        best = min(with_recovery, key=lambda s: (s.stats["recovery_median_ms"], s.name))
        parts.append(f"shortest recovery: {best.name} ({best.stats['recovery_median_ms']:.3f} ms)")
    else:
        parts.append("no recovery observed")
    with_cpu = [s for s in alive if s.stats.get("cpu_pct") is not None]
    if with_cpu:
        best = min(with_cpu, key=lambda s: (s.stats["cpu_pct"], s.name))
        parts.append(f"lowest cpu: {best.name} ({best.stats['cpu_pct']:.3f} %)")
    return "; ".join(parts)


def compare(
    variants: Mapping[str, VariantSeries],
    qos: QoSTarget,
    options: AnalysisOptions,
    baseline: str,
    experiment_id: str = "experiment",
    offset_ms: int = 0,
) -> ComparisonReport:
    """
    QoS elimination, pairwise significance on the objective's round-median series,
    then ranking by the objective with median recovery time and CPU as tie-breakers.
    """
    window = qos.evaluation_window
    from_ms = offset_ms + window.from_ms
    to_ms = offset_ms + window.to_ms if window.to_ms is not None else math.inf

    summaries: List[VariantSummary] = []
    for name in sorted(variants):
        series = variants[name]
        stats = _variant_stats(series, qos, from_ms, to_ms)
        verdicts = _qos_verdicts(stats, qos)
        summaries.append(VariantSummary(
            name=name,
            role=series.role,
            failed=series.failed,
            rounds_completed=series.rounds_completed,
            stats=stats,
            qos=verdicts,
            qos_passed=not series.failed and all(v.passed for v in verdicts),
        ))

    samples = {}
    for name, series in variants.items():
        if options.objective == Objective.RECOVERY_TIME:
            samples[name] = np.asarray(series.recovery_times, dtype=float)
            continue
        metric = "input_throughput_msg_s" if options.objective == Objective.THROUGHPUT else "latency_ms"
        aggregated = series.round_medians.get(metric)
        samples[name] = aggregated.window(from_ms, to_ms) if aggregated is not None else np.asarray([])
    alive = [s.name for s in summaries if not s.failed]
    matrix: Dict[str, Dict[str, float]] = {name: {} for name in alive}
    for i, a in enumerate(alive):
        for b in alive[i + 1:]:
            p = significance(samples[a], samples[b])
            matrix[a][b] = p
            matrix[b][a] = p

    survivors = [s for s in summaries if s.qos_passed]
    ranked = sorted(survivors, key=lambda s: (
        _objective_key(options.objective, s.stats),
        s.stats.get("recovery_median_ms") or 0.0,
        s.stats.get("cpu_pct") if s.stats.get("cpu_pct") is not None else math.inf,
        s.name,
    ))
    ranking = [s.name for s in ranked]

    winner = None
    by_name = {s.name: s for s in summaries}
    if ranking and ranking[0] != baseline:
        top = by_name[ranking[0]]
        base = by_name.get(baseline)
        if base is not None and not base.failed:
            p = matrix.get(top.name, {}).get(baseline, 1.0)
            better = _objective_key(options.objective, top.stats) < _objective_key(options.objective, base.stats)
            if p < options.alpha and better:
                winner = top.name
    logger.info(f"Comparison of {len(summaries)} variants: ranking {ranking}, winner {winner}")

    return ComparisonReport(
        experiment_id=experiment_id,
        baseline=baseline,
        objective=options.objective,
        alpha=options.alpha,
        variants=summaries,
        significance=matrix,
        ranking=ranking,
        winner=winner,
        tradeoff_note=_tradeoff_note(summaries),
        failed_variants=sorted(s.name for s in summaries if s.failed),
    )


# ----------------------------------------------------------------------
# Store-level entry point
# ----------------------------------------------------------------------

def build_variant_series(
    store: MetricsStore,
    pipeline_id: str,
    role: str,
    options: AnalysisOptions,
    step_s: float,
    failed: bool = False,
    rounds_completed: int = 0,
) -> VariantSeries:
    """Replica median per round, median across rounds, EWMA; plus every recovery time"""
    variant = VariantSeries(name=pipeline_id, role=role, failed=failed,
                            rounds_completed=rounds_completed, step_s=step_s)
    recorded = set(store.series_names())
    for series_name, replica_tag in REPLICA_TAGS.items():
        if series_name not in recorded:
            continue
        per_round = []
        for round_tag in store.tag_values(series_name, "round", {"pipeline_id": pipeline_id}):
            points = store.query_range(RangeQuery(series_name, {"pipeline_id": pipeline_id, "round": round_tag}))
            if replica_tag == "worker":
                # coordinators are reported separately from the worker fleet
                points = [p for p in points if p.tags.get("worker", "").startswith("worker-")]
            if points:
                stage = "worker_median" if replica_tag == "worker" else "sink_median"
                per_round.append(replica_median_series(points, series_name, pipeline_id, stage))
        if not per_round:
            continue
        combined = median_across_rounds(per_round)
        if not len(combined):
            continue
        variant.round_medians[series_name] = combined
        variant.smoothed[series_name] = ewma(combined, options.ewma_span_s, step_s)

    variant.recovery_times = [
        p.value for p in store.query_range(RangeQuery("recovery_time_ms", {"pipeline_id": pipeline_id}))
    ]
    return variant


def analyze_store(
    store: MetricsStore,
    plan: ExperimentPlan,
    roles: Mapping[str, str],
    failed: Iterable[str] = (),
    rounds_completed: Optional[Mapping[str, int]] = None,
    baseline: Optional[str] = None,
) -> Tuple[ComparisonReport, Dict[str, VariantSeries]]:
    failed = set(failed)
    rounds_completed = rounds_completed or {}
    configs = plan.variant_configs()
    variants = {}
    for pipeline_id, role in roles.items():
        config = configs.get(pipeline_id, plan.production)
        variants[pipeline_id] = build_variant_series(
            store, pipeline_id, role, plan.analysis,
            step_s=config.metric_interval_ms / 1000.0,
            failed=pipeline_id in failed,
            rounds_completed=rounds_completed.get(pipeline_id, 0),
        )
    if baseline is None:
        baseline = next((pid for pid, role in roles.items() if role == "production"), sorted(roles)[0])
    report = compare(variants, plan.qos, plan.analysis, baseline,
                     experiment_id=plan.experiment_id, offset_ms=plan.round_start_s * 1000)
    return report, variants
