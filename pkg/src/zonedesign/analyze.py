"""Reporting: workload variance tables, response/waiting/travel time metrics,
difference-in-difference comparisons, and cross-dataset workload normalization."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .estimate import CallRecord
from .geo import Design


def workload_variance(workloads) -> float:
    """Population variance of per-zone workloads, in squared input units."""
    w = np.asarray(list(workloads), dtype=float)
    if len(w) < 2:
        raise ValueError("variance needs at least two zone workloads")
    return float(((w - w.mean()) ** 2).mean())


def variance_change(before: float, after: float) -> float:
    """Percent change, 100 * (after - before) / before."""
    if not before > 0:
        raise ValueError("reference variance must be positive")
    return 100.0 * (after - before) / before


@dataclass
class WorkloadTable:
    """One variance-comparison row: per-zone workloads plus summary statistics."""

    zone_workloads: dict[str, float]   # hours/year
    total: float
    variance: float
    variance_change_pct: float | None = None

    @classmethod
    def from_workloads(cls, zone_workloads: dict[str, float],
                       reference_variance: float | None = None) -> "WorkloadTable":
        values = [zone_workloads[z] for z in sorted(zone_workloads)]
        var = workload_variance(values)
        change = variance_change(reference_variance, var) if reference_variance else None
        return cls(dict(zone_workloads), float(sum(values)), var, change)


@dataclass
class TimeMetrics:
    per_zone: dict[str, dict[str, float]]   # zone -> metric -> minutes
    citywide: dict[str, float]
    call_counts: dict[str, int]
    excluded: int


def time_metrics(records: list[CallRecord], design: Design,
                 priority: str | None = None,
                 date_range: tuple[datetime, datetime] | None = None) -> TimeMetrics:
    """Mean response/waiting/travel minutes per zone and citywide.

    Citywide means are call-weighted (mean over included calls, not the mean
    of zone means). Records with impossible timelines are excluded and
    counted; CallRecord construction already enforces ordering, so exclusion
    here covers records built by other paths.
    """
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    city_sum = np.zeros(3)
    city_n = 0
    excluded = 0
    for rec in records:
        if priority is not None and rec.priority != priority:
            continue
        if date_range is not None and not (date_range[0] <= rec.call_time < date_range[1]):
            continue
        vals = np.array([rec.response_s, rec.waiting_s, rec.travel_s])
        if (vals < 0).any():
            excluded += 1
            continue
        zone = design.zone_of(rec.incident_beat)
        if zone not in sums:
            sums[zone] = np.zeros(3)
            counts[zone] = 0
        sums[zone] += vals
        counts[zone] += 1
        city_sum += vals
        city_n += 1
    names = ("response", "waiting", "travel")
    per_zone = {
        zone: dict(zip(names, (sums[zone] / counts[zone] / 60.0).tolist()))
        for zone in sorted(sums)
    }
    citywide = dict(zip(names, (city_sum / max(city_n, 1) / 60.0).tolist()))
    return TimeMetrics(per_zone, citywide, dict(sorted(counts.items())), excluded)


@dataclass
class DidPoint:
    day: int
    delta_before: float
    delta_after: float


@dataclass
class DidResult:
    points: list[DidPoint]
    fraction_below: float


def did_analysis(series_first: dict[int, float], series_second: dict[int, float],
                 series_third: dict[int, float]) -> DidResult:
    """Difference-in-difference over three consecutive periods of daily variances.

    For each day-of-year present in all three series: delta_before is the
    change across the two pre-intervention periods, delta_after the change
    across the intervention boundary. Points below the diagonal
    (delta_after < delta_before) indicate a damped variance increase.
    """
    days = sorted(set(series_first) & set(series_second) & set(series_third))
    if not days:
        raise ValueError("no day-of-year overlap across the three periods")
    points = []
    below = 0
    for day in days:
        db = series_second[day] - series_first[day]
        da = series_third[day] - series_second[day]
        if not (np.isfinite(db) and np.isfinite(da)):
            continue
        points.append(DidPoint(day, float(db), float(da)))
        if da < db:
            below += 1
    return DidResult(points, below / len(points) if points else 0.0)


def daily_metric_variance(records: list[CallRecord], metric: str,
                          period: tuple[datetime, datetime],
                          design: Design | None = None,
                          zone: str | None = None) -> dict[int, float]:
    """Per-day-of-year population variance of a per-call time metric (minutes^2).

    Feed one of these per period into :func:`did_analysis`. With ``zone`` set,
    only that zone's calls (under ``design``) enter each day's variance.
    """
    attr = {"response": "response_s", "waiting": "waiting_s", "travel": "travel_s"}[metric]
    per_day: dict[int, list[float]] = {}
    for rec in records:
        if not (period[0] <= rec.call_time < period[1]):
            continue
        if zone is not None and design.zone_of(rec.incident_beat) != zone:
            continue
        per_day.setdefault(rec.call_time.timetuple().tm_yday, []).append(
            getattr(rec, attr) / 60.0)
    return {day: float(np.var(vals)) for day, vals in sorted(per_day.items()) if len(vals) >= 2}


@dataclass
class NormalizationResult:
    factors: dict[str, float]
    scaled: dict[str, dict[str, float]]


def normalize_workload(new_series: dict[str, dict[str, float]],
                       reference_series: dict[str, dict[str, float]],
                       overlap: list[str]) -> NormalizationResult:
    """Rescale a new workload series onto a reference dataset's level.

    Each zone gets one multiplicative factor, reference overlap mean over new
    overlap mean, applied across the whole new series. Multiplicative (rather
    than additive) alignment is a reporting choice; the factors are returned
    so the adjustment is visible.
    """
    factors = {}
    scaled = {}
    for zone in sorted(new_series):
        new_mean = float(np.mean([new_series[zone][p] for p in overlap]))
        ref_mean = float(np.mean([reference_series[zone][p] for p in overlap]))
        if new_mean == 0:
            raise ValueError(f"zone {zone}: overlap mean of the new series is zero")
        factors[zone] = ref_mean / new_mean
        scaled[zone] = {p: v * factors[zone] for p, v in new_series[zone].items()}
    return NormalizationResult(factors, scaled)


def workload_histogram(records: list[CallRecord], metric: str, bin_minutes: float = 1.0,
                       max_minutes: float = 120.0) -> dict[str, list[float]]:
    """Raw histogram of a per-call time metric for external plotting."""
    attr = {"response": "response_s", "waiting": "waiting_s", "travel": "travel_s"}[metric]
    vals = np.array([getattr(r, attr) / 60.0 for r in records])
    edges = np.arange(0.0, max_minutes + bin_minutes, bin_minutes)
    counts, _ = np.histogram(vals, bins=edges)
    return {"bin_edges_minutes": edges.tolist(), "counts": counts.tolist()}
