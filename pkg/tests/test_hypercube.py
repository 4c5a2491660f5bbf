import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zonedesign.dispatch_sim import simulate_zone
from zonedesign.hypercube import (ConvergenceError, NoIdleUnitError, UnstableZoneError,
                                  ZoneQueue, build_transition_matrix, dispatch_table,
                                  mmc_busy_distribution, optimal_dispatch,
                                  oracle_steady_state, performance_report,
                                  solve_steady_state)

from conftest import random_zone_queue


def simple_zq(n, lam_total=1.0, mu=1.0, seed=0):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.5, 1.0, n)
    lam *= lam_total / lam.sum()
    tau = rng.uniform(30.0, 900.0, (n, n))
    return ZoneQueue(tuple(f"u{i}" for i in range(n)), lam, mu, tau)


class TestZoneQueue:
    def test_rejects_unstable(self):
        with pytest.raises(UnstableZoneError):
            ZoneQueue(("a",), np.array([2.0]), 1.0, np.array([[1.0]]))

    def test_rejects_oversized_state_space(self):
        n = 25
        with pytest.raises(ValueError, match="refusing state spaces"):
            ZoneQueue(tuple(f"u{i}" for i in range(n)), np.full(n, 0.1), 1.0,
                      np.ones((n, n)))

    def test_rejects_negative_travel(self):
        with pytest.raises(ValueError, match="travel"):
            ZoneQueue(("a", "b"), np.array([0.1, 0.1]), 1.0,
                      np.array([[0.0, -1.0], [1.0, 0.0]]))


class TestOptimalDispatch:
    def test_all_idle_prefers_home_unit(self):
        tau = np.array([[1.0, 4.0], [4.0, 2.0]])
        zq = ZoneQueue(("a", "b"), np.array([0.3, 0.3]), 1.0, tau)
        assert optimal_dispatch(zq, 0, "a") == 0
        assert optimal_dispatch(zq, 0, "b") == 1

    def test_three_unit_example(self):
        # unit 1 busy (state 0b010); call in the middle beat: 4s < 5s
        tau = np.array([[1.0, 4.0, 7.0], [4.0, 2.0, 5.0], [7.0, 5.0, 3.0]])
        zq = ZoneQueue(("a", "b", "c"), np.array([0.3, 0.3, 0.3]), 1.0, tau)
        assert optimal_dispatch(zq, 0b010, "b") == 0

    def test_tie_breaks_to_lowest_index(self):
        tau = np.array([[5.0, 5.0], [5.0, 5.0]])
        zq = ZoneQueue(("a", "b"), np.array([0.3, 0.3]), 1.0, tau)
        assert optimal_dispatch(zq, 0, "b") == 0

    def test_all_busy_raises(self):
        zq = simple_zq(2)
        with pytest.raises(NoIdleUnitError):
            optimal_dispatch(zq, 0b11, "u0")


class TestTransitionMatrix:
    def test_single_unit_chain(self):
        zq = ZoneQueue(("a",), np.array([1.0]), 2.0, np.array([[5.0]]))
        q = build_transition_matrix(zq).toarray()
        assert np.allclose(q, [[-1.0, 1.0], [2.0, -2.0]])

    def test_upward_rates_partition_total(self):
        zq = simple_zq(3, seed=5)
        q = build_transition_matrix(zq).toarray()
        n_states = 8
        for n in range(n_states - 1):
            up = sum(q[n, m] for m in range(n_states) if m > n)
            assert up == pytest.approx(zq.total_rate, abs=1e-12)

    @pytest.mark.parametrize("n_units", [2, 3, 4])
    def test_rows_sum_zero_offdiag_nonneg(self, n_units):
        zq = simple_zq(n_units, seed=n_units)
        q = build_transition_matrix(zq).toarray()
        assert np.abs(q.sum(axis=1)).max() < 1e-12
        off = q - np.diag(np.diag(q))
        assert (off >= 0).all()
        nnz_per_row = (q != 0).sum(axis=1)
        assert nnz_per_row.max() <= n_units + 1


class TestSteadyState:
    def test_mm1_closed_form(self):
        zq = ZoneQueue(("a",), np.array([1.0]), 2.0, np.array([[5.0]]))
        ss = solve_steady_state(zq)
        assert ss.pi[0] == pytest.approx(0.5, abs=1e-8)
        assert ss.pi[1] == pytest.approx(0.25, abs=1e-8)
        assert ss.tail_mass == pytest.approx(0.25, abs=1e-8)

    def test_two_unit_erlang_closed_form(self):
        zq = ZoneQueue(("a", "b"), np.array([0.5, 0.5]), 1.0,
                       np.array([[60.0, 300.0], [300.0, 90.0]]))
        ss = solve_steady_state(zq)
        assert ss.erlang_p0 == pytest.approx(1 / 3, abs=1e-12)
        for m in (1, 2, 3):
            assert ss.saturated_prob(m) == pytest.approx((0.5) ** (m + 1) / 3, abs=1e-8)
        assert ss.tail_mass == pytest.approx(ss.saturated_prob(1) / (1 - 0.5), abs=1e-8)

    def test_matches_oracle_on_random_instance(self):
        rng = np.random.default_rng(11)
        zq = random_zone_queue(rng, 3)
        ss = solve_steady_state(zq)
        oracle = oracle_steady_state(zq, queue_cap=30)
        assert np.abs(ss.pi - oracle.pi).max() < 1e-6
        assert abs(ss.tail_mass - oracle.tail_mass) < 1e-6

    def test_distribution_sums_to_one(self):
        zq = simple_zq(4, seed=2)
        ss = solve_steady_state(zq)
        assert ss.pi.sum() + ss.tail_mass == pytest.approx(1.0, abs=1e-9)

    def test_nonconvergence_reports_residual(self):
        zq = simple_zq(3, seed=1)
        with pytest.raises(ConvergenceError) as err:
            solve_steady_state(zq, tol=1e-12, max_iter=3)
        assert err.value.residual > 0


class TestOracle:
    def test_refuses_large_instances(self):
        zq = simple_zq(3)
        with pytest.raises(ValueError, match="queue_cap"):
            oracle_steady_state(zq, queue_cap=0)

    def test_cap_monotonicity(self):
        zq = simple_zq(3, lam_total=2.0, seed=9)   # heavier load, visible tail
        ss = solve_steady_state(zq, tol=1e-12)
        errs = []
        for cap in (5, 10, 20):
            oracle = oracle_steady_state(zq, cap)
            errs.append(np.abs(ss.pi - oracle.pi).max())
        assert errs[0] > errs[1] > errs[2]


class TestInvariants:
    @pytest.mark.parametrize("seed", range(6))
    def test_aggregation_matches_mmc(self, seed):
        rng = np.random.default_rng(seed)
        zq = random_zone_queue(rng, int(rng.integers(2, 5)))
        ss = solve_steady_state(zq, tol=1e-12)
        mmc = mmc_busy_distribution(zq)
        for s in range(zq.n_units + 1):
            mass = sum(ss.pi[n] for n in range(1 << zq.n_units)
                       if bin(n).count("1") == s)
            assert mass == pytest.approx(mmc[s], abs=1e-8)

    @pytest.mark.parametrize("seed", range(4))
    def test_conservation_and_column_law(self, seed):
        rng = np.random.default_rng(100 + seed)
        zq = random_zone_queue(rng, 3)
        ss = solve_steady_state(zq, tol=1e-12)
        rep = performance_report(zq, ss)
        assert rep.unit_workload.sum() == pytest.approx(zq.total_rate / zq.mu, abs=1e-6)
        assert rep.rho.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(rep.rho.sum(axis=0), zq.lam / zq.total_rate, atol=1e-9)
        assert (rep.unit_workload > 0).all() and (rep.unit_workload < 1).all()

    def test_halving_rates_strictly_reduces_workloads(self):
        zq = simple_zq(3, lam_total=2.0, seed=3)
        rep_full = performance_report(zq, solve_steady_state(zq))
        half = ZoneQueue(zq.zone_beats, zq.lam * 0.5, zq.mu, zq.tau)
        rep_half = performance_report(half, solve_steady_state(half))
        assert (rep_half.unit_workload < rep_full.unit_workload).all()


class TestPerformanceReport:
    def test_single_unit_serves_everything(self):
        zq = ZoneQueue(("a",), np.array([0.8]), 2.0, np.array([[120.0]]))
        rep = performance_report(zq, solve_steady_state(zq))
        assert rep.rho[0, 0] == pytest.approx(1.0, abs=1e-9)
        assert rep.unit_workload[0] == pytest.approx(0.4, abs=1e-8)

    def test_symmetric_zone_balances_workload(self):
        tau = np.array([[60.0, 300.0], [300.0, 60.0]])
        zq = ZoneQueue(("a", "b"), np.array([0.4, 0.4]), 1.0, tau)
        rep = performance_report(zq, solve_steady_state(zq, tol=1e-12))
        assert rep.unit_workload[0] == pytest.approx(rep.unit_workload[1], abs=1e-8)
        assert rep.xi[0] == pytest.approx(rep.xi[1], abs=1e-6)

    def test_response_exceeds_travel(self):
        zq = simple_zq(3, lam_total=2.0, seed=4)
        rep = performance_report(zq, solve_steady_state(zq))
        assert rep.response_zone > rep.travel_zone
        assert rep.mean_queue_delay > 0

    def test_against_simulation(self):
        zq = simple_zq(3, lam_total=1.8, seed=8)
        rep = performance_report(zq, solve_steady_state(zq, tol=1e-12))
        sim = simulate_zone(zq, target_calls=150_000, seed=77)
        z_w = np.abs(sim.workload.value - rep.unit_workload) / sim.workload.stderr
        z_rho = np.abs(sim.rho.value - rep.rho) / np.maximum(sim.rho.stderr, 1e-9)
        z_xi = np.abs(sim.xi.value - rep.xi) / sim.xi.stderr
        assert z_w.max() < 3.0
        assert z_rho.max() < 3.5
        assert z_xi.max() < 3.0
        # waiting time, as an extra cross-check (not an acceptance quantity)
        assert sim.mean_wait_hours == pytest.approx(
            rep.mean_queue_delay / 3600.0, rel=0.1)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_dispatch_table_matches_pointwise(seed):
    rng = np.random.default_rng(seed)
    zq = random_zone_queue(rng, 3)
    eta = dispatch_table(zq)
    state = int(rng.integers(0, 7))
    beat = int(rng.integers(0, 3))
    assert eta[state, beat] == optimal_dispatch(zq, state, zq.zone_beats[beat])


def test_tail_is_geometric_in_closed_form():
    zq = simple_zq(2, lam_total=1.2, seed=6)
    ss = solve_steady_state(zq, tol=1e-12)
    r = ss.queue_factor
    # P{S_n} anchored at the all-busy state and the M/M/c anchor agree
    a = zq.total_rate / zq.mu
    mmc_all_busy = ss.erlang_p0 * a ** 2 / math.factorial(2)
    assert ss.p_all_busy == pytest.approx(mmc_all_busy, abs=1e-9)
    assert ss.tail_mass == pytest.approx(ss.p_all_busy * r / (1 - r), abs=1e-9)
