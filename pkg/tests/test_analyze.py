from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zonedesign.analyze import (DidPoint, daily_metric_variance, did_analysis,
                                normalize_workload, time_metrics, variance_change,
                                workload_histogram, workload_variance, WorkloadTable)
from zonedesign.geo import Design

from test_estimate import make_record

# Published comparison rows (workloads in 1e4 hours/year, variances in 1e7)
PRED_2018 = [5.9558, 6.5833, 5.6366, 5.9606, 5.9143, 4.3488]
REDESIGN_2018 = [5.9018, 5.6961, 5.6366, 5.9606, 6.1595, 5.0448]
BEFORE_ROW = [6.0568, 6.8737, 5.5450, 5.7040, 6.1607, 4.7360]
AFTER_ROW = [5.5142, 6.3753, 5.7157, 5.0090, 5.9462, 5.0129]
VAR_2016 = 3.3441e7
VAR_2017 = 3.9454e7


class TestWorkloadVariance:
    def test_predicted_2018_row(self):
        var = workload_variance(np.array(PRED_2018) * 1e4)
        assert var == pytest.approx(4.6375e7, abs=0.001e7)

    def test_redesign_2018_row(self):
        var = workload_variance(np.array(REDESIGN_2018) * 1e4)
        assert var == pytest.approx(1.2442e7, abs=0.001e7)

    def test_before_after_rows(self):
        assert workload_variance(np.array(BEFORE_ROW) * 1e4) == pytest.approx(
            4.2375e7, abs=0.001e7)
        assert workload_variance(np.array(AFTER_ROW) * 1e4) == pytest.approx(
            2.3925e7, abs=0.001e7)

    def test_equal_workloads_zero(self):
        assert workload_variance([3.0, 3.0, 3.0]) == 0.0

    def test_needs_two_zones(self):
        with pytest.raises(ValueError):
            workload_variance([1.0])

    @given(st.lists(st.floats(0, 1e5), min_size=2, max_size=8),
           st.floats(-1e4, 1e4), st.floats(0.01, 100.0))
    @settings(max_examples=60)
    def test_translation_and_scaling(self, w, shift, scale):
        base = workload_variance(w)
        shifted = workload_variance([x + shift for x in w])
        scaled = workload_variance([x * scale for x in w])
        assert shifted == pytest.approx(base, rel=1e-6, abs=1e-6)
        assert scaled == pytest.approx(base * scale ** 2, rel=1e-6, abs=1e-9)


class TestVarianceChange:
    def test_redesign_vs_2016_baseline(self):
        var = workload_variance(np.array(REDESIGN_2018) * 1e4)
        assert variance_change(VAR_2016, var) == pytest.approx(-62.79, abs=0.05)

    def test_no_redesign_vs_2016_baseline(self):
        var = workload_variance(np.array(PRED_2018) * 1e4)
        assert variance_change(VAR_2016, var) == pytest.approx(38.67, abs=0.05)

    def test_year_on_year_after_redesign(self):
        before = workload_variance(np.array(BEFORE_ROW) * 1e4)
        after = workload_variance(np.array(AFTER_ROW) * 1e4)
        assert variance_change(before, after) == pytest.approx(-43.54, abs=0.05)
        assert variance_change(VAR_2017, before) == pytest.approx(7.40, abs=0.05)

    def test_equal_values_zero(self):
        assert variance_change(5.0, 5.0) == 0.0

    def test_requires_positive_reference(self):
        with pytest.raises(ValueError):
            variance_change(0.0, 1.0)


def test_workload_table_totals():
    table = WorkloadTable.from_workloads(
        {f"Z{i + 1}": w * 1e4 for i, w in enumerate(PRED_2018)},
        reference_variance=VAR_2016)
    assert table.total == pytest.approx(sum(PRED_2018) * 1e4, abs=1e-6)
    # published total row is 34.3996e4, rounded from the zone entries
    assert table.total == pytest.approx(34.3996e4, abs=3.0)
    assert table.variance_change_pct == pytest.approx(38.67, abs=0.05)


DESIGN2 = Design({"b00": "Z1", "b01": "Z2"})


class TestTimeMetrics:
    def test_single_record_timeline_identity(self):
        rec = make_record(incident="b00", waiting_s=180.0, travel_s=300.0)
        tm = time_metrics([rec], DESIGN2)
        assert tm.per_zone["Z1"]["response"] == pytest.approx(8.0)
        assert tm.per_zone["Z1"]["waiting"] == pytest.approx(3.0)
        assert tm.per_zone["Z1"]["travel"] == pytest.approx(5.0)

    def test_citywide_is_call_weighted(self):
        recs = [make_record(incident="b00", waiting_s=0, travel_s=600.0)]
        recs += [make_record(incident="b01", waiting_s=0, travel_s=1200.0)
                 for _ in range(3)]
        tm = time_metrics(recs, DESIGN2)
        assert tm.per_zone["Z1"]["travel"] == pytest.approx(10.0)
        assert tm.per_zone["Z2"]["travel"] == pytest.approx(20.0)
        assert tm.citywide["travel"] == pytest.approx(17.5)
        assert tm.call_counts == {"Z1": 1, "Z2": 3}

    def test_priority_and_date_filters(self):
        t1 = datetime(2018, 5, 1, tzinfo=timezone.utc)
        t2 = datetime(2019, 5, 1, tzinfo=timezone.utc)
        recs = [make_record(incident="b00", travel_s=300, start=t1, priority="high"),
                make_record(incident="b00", travel_s=900, start=t1, priority="low"),
                make_record(incident="b00", travel_s=1500, start=t2, priority="high")]
        tm = time_metrics(recs, DESIGN2, priority="high",
                          date_range=(datetime(2018, 1, 1, tzinfo=timezone.utc),
                                      datetime(2019, 1, 1, tzinfo=timezone.utc)))
        assert tm.citywide["travel"] == pytest.approx(5.0)
        assert sum(tm.call_counts.values()) == 1

    def test_response_is_waiting_plus_travel_for_all_records(self):
        rng = np.random.default_rng(0)
        recs = [make_record(incident="b00", waiting_s=float(rng.uniform(0, 600)),
                            travel_s=float(rng.uniform(0, 1200))) for _ in range(50)]
        tm = time_metrics(recs, DESIGN2)
        assert tm.citywide["response"] == pytest.approx(
            tm.citywide["waiting"] + tm.citywide["travel"], abs=1e-9)

    def test_engineered_change_ratio(self):
        # year 2: every time scaled by 0.942, a -5.80% shift in the means
        base_recs = [make_record(incident="b00", waiting_s=w, travel_s=t)
                     for w, t in [(120, 300), (240, 600), (60, 480)]]
        scaled_recs = [make_record(incident="b00", waiting_s=w * 0.942,
                                   travel_s=t * 0.942)
                       for w, t in [(120, 300), (240, 600), (60, 480)]]
        before = time_metrics(base_recs, DESIGN2).citywide["response"]
        after = time_metrics(scaled_recs, DESIGN2).citywide["response"]
        assert variance_change(before, after) == pytest.approx(-5.80, abs=0.01)


class TestDid:
    def test_identical_periods_all_on_origin(self):
        series = {d: 4.0 + d for d in range(1, 30)}
        result = did_analysis(series, dict(series), dict(series))
        assert all(p.delta_before == 0 and p.delta_after == 0 for p in result.points)
        assert result.fraction_below == 0.0

    def test_uniform_reduction_all_below(self):
        s1 = {d: 10.0 + (d % 5) for d in range(1, 50)}
        s2 = {d: v + 2.0 for d, v in s1.items()}
        s3 = {d: v + 0.5 for d, v in s2.items()}   # growth damped after redesign
        result = did_analysis(s1, s2, s3)
        assert result.fraction_below == 1.0
        assert all(p.delta_after < p.delta_before for p in result.points)

    def test_antisymmetry_under_pair_swap(self):
        rng = np.random.default_rng(3)
        days = range(1, 80)
        s1 = {d: float(rng.uniform(5, 15)) for d in days}
        s2 = {d: float(rng.uniform(5, 15)) for d in days}
        s3 = {d: float(rng.uniform(5, 15)) for d in days}
        fwd = did_analysis(s1, s2, s3)
        rev = did_analysis(s3, s2, s1)
        for p, q in zip(fwd.points, rev.points):
            assert p.delta_before == pytest.approx(-q.delta_after)
            assert p.delta_after == pytest.approx(-q.delta_before)

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(9)
        days = sorted(rng.choice(range(1, 365), 60, replace=False).tolist())
        s1 = {d: float(rng.gamma(2.0, 3.0)) for d in days}
        s2 = {d: float(rng.gamma(2.0, 4.0)) for d in days}
        s3 = {d: float(rng.gamma(2.0, 3.5)) for d in days}
        result = did_analysis(s1, s2, s3)
        expected_below = sum(
            1 for d in days if (s3[d] - s2[d]) < (s2[d] - s1[d])) / len(days)
        assert result.fraction_below == pytest.approx(expected_below)
        lookup = {p.day: p for p in result.points}
        for d in days:
            assert lookup[d].delta_before == pytest.approx(s2[d] - s1[d])
            assert lookup[d].delta_after == pytest.approx(s3[d] - s2[d])

    def test_requires_overlap(self):
        with pytest.raises(ValueError, match="overlap"):
            did_analysis({1: 1.0}, {2: 1.0}, {3: 1.0})


def test_daily_metric_variance_groups_by_day():
    t0 = datetime(2018, 3, 10, 8, 0, tzinfo=timezone.utc)
    recs = [make_record(incident="b00", travel_s=300, start=t0),
            make_record(incident="b00", travel_s=900, start=t0 + timedelta(hours=2)),
            make_record(incident="b00", travel_s=600, start=t0 + timedelta(days=1))]
    period = (datetime(2018, 1, 1, tzinfo=timezone.utc),
              datetime(2019, 1, 1, tzinfo=timezone.utc))
    series = daily_metric_variance(recs, "travel", period)
    day = t0.timetuple().tm_yday
    assert series[day] == pytest.approx(np.var([5.0, 15.0]))
    assert (day + 1) not in series  # single-call days carry no variance


class TestNormalization:
    def test_identical_series_unit_factors(self):
        series = {"Z1": {"2017": 4.0, "2018": 5.0}, "Z2": {"2017": 6.0, "2018": 7.0}}
        result = normalize_workload(series, series, ["2017"])
        assert result.factors == {"Z1": 1.0, "Z2": 1.0}
        assert result.scaled == series

    def test_doubled_series_halved(self):
        ref = {"Z1": {"2017": 4.0, "2018": 5.0}}
        new = {"Z1": {"2017": 8.0, "2018": 10.0}}
        result = normalize_workload(new, ref, ["2017"])
        assert result.factors["Z1"] == pytest.approx(0.5)
        assert result.scaled["Z1"] == {"2017": 4.0, "2018": 5.0}

    def test_overlap_means_match_exactly(self):
        rng = np.random.default_rng(4)
        periods = [f"p{i}" for i in range(6)]
        overlap = periods[:3]
        ref = {z: {p: float(rng.uniform(2, 9)) for p in periods} for z in ("Z1", "Z2", "Z3")}
        new = {z: {p: float(rng.uniform(2, 9)) for p in periods} for z in ("Z1", "Z2", "Z3")}
        result = normalize_workload(new, ref, overlap)
        for z in ref:
            scaled_mean = np.mean([result.scaled[z][p] for p in overlap])
            ref_mean = np.mean([ref[z][p] for p in overlap])
            assert scaled_mean == pytest.approx(ref_mean, rel=1e-12)

    def test_zero_overlap_mean_is_error(self):
        with pytest.raises(ValueError, match="zero"):
            normalize_workload({"Z1": {"a": 0.0}}, {"Z1": {"a": 1.0}}, ["a"])


def test_histogram_counts_calls():
    recs = [make_record(travel_s=90.0), make_record(travel_s=150.0)]
    hist = workload_histogram(recs, "travel", bin_minutes=1.0, max_minutes=5.0)
    assert sum(hist["counts"]) == 2
    assert hist["counts"][1] == 1 and hist["counts"][2] == 1
