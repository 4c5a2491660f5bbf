"""Hypercube queueing model for one zone.

State space: the 2^N busy/idle configurations of the zone's N patrol units
(unsaturated states, queue empty) plus a geometric saturated tail (all units
busy, calls backlogged). Unit j of a zone is the patrol unit homed in the
zone's j-th beat; state n has unit j busy iff bit j of n is set.

Rates are events/hour; travel times are seconds. Reports convert explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

STATE_SPACE_CEILING = 24  # 2^24 states is the practical sparse-iteration limit
HOURS_PER_YEAR = 8760.0


class UnstableZoneError(ValueError):
    """Aggregate arrival rate meets or exceeds total service capacity."""


class NoIdleUnitError(RuntimeError):
    """Dispatch requested in the all-busy state (caller must queue FCFS)."""


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"power iteration did not converge in {iterations} iterations "
                         f"(last sup-norm change {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class ZoneQueue:
    """One zone's queueing instance: beats/units, arrival rates, service rate, travel."""

    zone_beats: tuple[str, ...]
    lam: np.ndarray          # per-beat arrivals, calls/hour
    mu: float                # service completions per unit, 1/hour
    tau: np.ndarray          # tau[i, j]: seconds from unit i's home beat to beat j

    def __post_init__(self):
        n = len(self.zone_beats)
        if n == 0:
            raise ValueError("zone has no beats")
        if n > STATE_SPACE_CEILING:
            raise ValueError(
                f"zone has {n} units; refusing state spaces beyond 2^{STATE_SPACE_CEILING}")
        lam = np.asarray(self.lam, dtype=float)
        tau = np.asarray(self.tau, dtype=float)
        if lam.shape != (n,):
            raise ValueError("lam must have one rate per zone beat")
        if (lam < 0).any():
            raise ValueError("arrival rates must be nonnegative")
        if not self.mu > 0:
            raise ValueError("service rate must be positive")
        if tau.shape != (n, n):
            raise ValueError("tau must be the zone-restricted square travel matrix")
        if not np.isfinite(tau).all() or (tau < 0).any():
            raise ValueError("travel times must be finite and nonnegative")
        if lam.sum() >= n * self.mu:
            raise UnstableZoneError(
                f"lambda={lam.sum():.4g} >= N*mu={n * self.mu:.4g}; zone is unstable")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "tau", tau)

    @property
    def n_units(self) -> int:
        return len(self.zone_beats)

    @property
    def total_rate(self) -> float:
        return float(self.lam.sum())

    @property
    def queue_factor(self) -> float:
        return self.total_rate / (self.n_units * self.mu)


@dataclass(frozen=True)
class SteadyState:
    """Stationary distribution: unsaturated pi plus aggregated geometric tail."""

    pi: np.ndarray
    tail_mass: float
    queue_factor: float
    erlang_p0: float

    @property
    def n_units(self) -> int:
        return int(round(math.log2(len(self.pi))))

    @property
    def p_all_busy(self) -> float:
        return float(self.pi[-1])

    def saturated_prob(self, m: int) -> float:
        """P{m calls in queue}, m >= 1; geometric anchored at the all-busy state."""
        if m < 1:
            raise ValueError("saturated states have m >= 1 queued calls")
        return self.p_all_busy * self.queue_factor ** m


@dataclass(frozen=True)
class PerformanceReport:
    """Dispatch fractions, travel/response times (seconds) and workloads for a zone."""

    zone_beats: tuple[str, ...]
    rho: np.ndarray            # rho[i, j]: share of all calls sending unit i to beat j
    rho_direct: np.ndarray     # no-queue-delay part
    rho_queued: np.ndarray     # positive-queue-delay part
    p_queue: float             # P'_Q
    xi: np.ndarray             # expected travel time per dispatch of unit i, seconds
    travel_by_beat: np.ndarray
    travel_zone: float
    tq_bar: float              # mean travel time of queue-delayed calls, seconds
    mean_queue_delay: float    # seconds
    response_by_beat: np.ndarray
    response_zone: float
    unit_workload: np.ndarray  # utilization of unit i
    zone_workload: float
    zone_workload_hours_per_year: float


def erlang_p0(a: float, n: int) -> float:
    """M/M/c normalization constant for offered load a = lambda/mu and c = n servers."""
    r = a / n
    if r >= 1:
        raise UnstableZoneError("offered load at or above capacity")
    total = sum(a ** s / math.factorial(s) for s in range(n))
    total += a ** n / math.factorial(n) / (1.0 - r)
    return 1.0 / total


def mmc_busy_distribution(zq: ZoneQueue) -> np.ndarray:
    """M/M/c probability of exactly s busy servers (s = 0..N), queue empty for s = N."""
    a = zq.total_rate / zq.mu
    p0 = erlang_p0(a, zq.n_units)
    return np.array([p0 * a ** s / math.factorial(s) for s in range(zq.n_units + 1)])


def dispatch_table(zq: ZoneQueue) -> np.ndarray:
    """eta[n, j]: unit dispatched to a call in beat j under state n (-1 if all busy).

    The nearest idle unit by mean travel time wins; ties break to the lowest
    unit index so transition matrices are reproducible.
    """
    n_units = zq.n_units
    n_states = 1 << n_units
    eta = np.full((n_states, n_units), -1, dtype=np.int8)
    tau = zq.tau
    for n in range(n_states - 1):
        busy = np.array([(n >> u) & 1 for u in range(n_units)], dtype=bool)
        masked = np.where(busy[:, None], np.inf, tau)
        eta[n] = masked.argmin(axis=0)
    return eta


def optimal_dispatch(zq: ZoneQueue, state: int, call_beat: str) -> int:
    """Index of the unit dispatched to ``call_beat`` under hypercube state ``state``."""
    if not 0 <= state < (1 << zq.n_units):
        raise ValueError(f"state {state} out of range")
    if state == (1 << zq.n_units) - 1:
        raise NoIdleUnitError("all units busy; call queues FCFS")
    try:
        j = zq.zone_beats.index(call_beat)
    except ValueError:
        raise ValueError(f"call beat {call_beat!r} not in zone") from None
    best_unit, best_tau = -1, np.inf
    for u in range(zq.n_units):
        if (state >> u) & 1:
            continue
        if zq.tau[u, j] < best_tau:
            best_unit, best_tau = u, zq.tau[u, j]
    return best_unit


def build_transition_matrix(zq: ZoneQueue, eta: np.ndarray | None = None) -> sp.csr_matrix:
    """Sparse generator over the 2^N unsaturated states.

    Upward transitions aggregate the arrival rates of the beats the dispatch
    rule sends to each idle unit; downward transitions complete at mu per busy
    unit. Rows sum to zero; the all-busy -> S1 boundary flow is added by the
    solver, not here.
    """
    n_units = zq.n_units
    n_states = 1 << n_units
    if eta is None:
        eta = dispatch_table(zq)
    rows, cols, vals = [], [], []
    mu = zq.mu
    for n in range(n_states):
        diag = 0.0
        for u in range(n_units):
            if (n >> u) & 1:
                rows.append(n)
                cols.append(n & ~(1 << u))
                vals.append(mu)
                diag += mu
        if n != n_states - 1:
            up = np.zeros(n_units)
            np.add.at(up, eta[n], zq.lam)
            for u in range(n_units):
                if up[u] > 0.0:
                    rows.append(n)
                    cols.append(n | (1 << u))
                    vals.append(up[u])
                    diag += up[u]
        rows.append(n)
        cols.append(n)
        vals.append(-diag)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_states, n_states))


def solve_steady_state(zq: ZoneQueue, tol: float = 1e-9, max_iter: int = 10 ** 6) -> SteadyState:
    """Stationary distribution by uniformized power iteration.

    The infinite saturated tail is exact-aggregated into one boundary state:
    all-busy -> tail at rate lambda, tail -> all-busy at rate N*mu*(1-r)
    (the tail's conditional distribution is geometric, so its expected exit
    rate is N*mu*P{S_1}/tail_mass = N*mu*(1-r)). The stationary distribution
    of this augmented finite chain restricts exactly to the true one.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n_states = 1 << zq.n_units
    r = zq.queue_factor
    q = build_transition_matrix(zq).tolil()
    tail_idx = n_states
    q.resize((n_states + 1, n_states + 1))
    lam = zq.total_rate
    exit_rate = zq.n_units * zq.mu * (1.0 - r)
    q[n_states - 1, tail_idx] = lam
    q[n_states - 1, n_states - 1] -= lam
    q[tail_idx, n_states - 1] = exit_rate
    q[tail_idx, tail_idx] = -exit_rate
    q = q.tocsr()
    gamma = float(np.abs(q.diagonal()).max())
    p = sp.identity(n_states + 1, format="csr") + q / gamma
    pi = np.full(n_states + 1, 1.0 / (n_states + 1))
    for _ in range(max_iter):
        nxt = pi @ p
        delta = float(np.abs(nxt - pi).max())
        pi = nxt
        if delta < tol:
            break
    else:
        raise ConvergenceError(max_iter, delta)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    a = zq.total_rate / zq.mu
    return SteadyState(pi=pi[:n_states], tail_mass=float(pi[tail_idx]),
                       queue_factor=r, erlang_p0=erlang_p0(a, zq.n_units))


def oracle_steady_state(zq: ZoneQueue, queue_cap: int) -> SteadyState:
    """Exact direct solve of the chain truncated at ``queue_cap`` backlogged calls.

    Test oracle for small instances (N <= 12). Truncation redistributes
    O(r^queue_cap) of probability, so agreement with the production solver
    improves geometrically as the cap grows.
    """
    if zq.n_units > 12:
        raise ValueError("oracle is for instances with N <= 12")
    if queue_cap < 1:
        raise ValueError("queue_cap must be >= 1")
    n_states = 1 << zq.n_units
    total = n_states + queue_cap
    q = build_transition_matrix(zq).tolil()
    q.resize((total, total))
    lam = zq.total_rate
    nmu = zq.n_units * zq.mu
    all_busy = n_states - 1
    # saturated birth-death ladder, truncated
    prev = all_busy
    for m in range(queue_cap):
        s = n_states + m
        q[prev, s] = lam
        q[prev, prev] -= lam
        q[s, prev] = nmu
        q[s, s] -= nmu
        prev = s
    a = q.toarray().T
    a[-1, :] = 1.0
    b = np.zeros(total)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    z = zq.total_rate / zq.mu
    return SteadyState(pi=pi[:n_states], tail_mass=float(pi[n_states:].sum()),
                       queue_factor=zq.queue_factor, erlang_p0=erlang_p0(z, zq.n_units))


def performance_report(zq: ZoneQueue, ss: SteadyState) -> PerformanceReport:
    """All performance measures of the zone under steady state ``ss``.

    Travel times come in two regimes: dispatches with no queue delay travel
    from the serving unit's home beat, while queue-delayed dispatches travel
    between incident locations, with mean tq_bar weighted by arrival rates at
    both ends. The queue-delay term of response time is the closed-form sum
    of the geometric tail.
    """
    n_units = zq.n_units
    n_states = 1 << n_units
    eta = dispatch_table(zq)
    pi = ss.pi
    lam = zq.lam
    lam_total = zq.total_rate
    r = ss.queue_factor
    p_all_busy = ss.p_all_busy
    p_queue = ss.tail_mass + p_all_busy

    # state_share[i, j]: total pi of non-all-busy states where unit i serves beat j
    state_share = np.zeros((n_units, n_units))
    units = np.arange(n_units)
    for n in range(n_states - 1):
        state_share[eta[n], units] += pi[n]
    rho_direct = state_share * (lam / lam_total)[None, :]
    rho_queued = np.tile(lam / lam_total / n_units * p_queue, (n_units, 1))
    rho = rho_direct + rho_queued

    tq_bar = float(lam @ zq.tau @ lam) / lam_total ** 2

    denom = rho_direct.sum(axis=1) + p_queue / n_units
    xi = (np.einsum("ij,ij->i", rho_direct, zq.tau) + tq_bar * p_queue / n_units) / denom

    # travel to beat j; the no-delay conditional uses state shares so beats
    # with zero arrivals still get a defined mean
    share_sum = state_share.sum(axis=0)
    cond_direct = np.einsum("ij,ij->j", state_share, zq.tau) / share_sum
    travel_by_beat = cond_direct * (1.0 - p_queue) + (lam @ zq.tau) / lam_total * p_queue
    travel_zone = float(np.einsum("ij,ij->", rho_direct, zq.tau) + p_queue * tq_bar)

    queue_delay_hours = p_all_busy / (zq.mu * n_units * (1.0 - r) ** 2)
    mean_queue_delay = queue_delay_hours * 3600.0
    response_by_beat = travel_by_beat + mean_queue_delay
    response_zone = travel_zone + mean_queue_delay

    busy_mask = np.array([[(n >> u) & 1 for u in range(n_units)]
                          for n in range(n_states)], dtype=float)
    unit_workload = busy_mask.T @ pi + ss.tail_mass
    zone_workload = float(unit_workload.sum())

    return PerformanceReport(
        zone_beats=zq.zone_beats,
        rho=rho, rho_direct=rho_direct, rho_queued=rho_queued,
        p_queue=float(p_queue),
        xi=xi,
        travel_by_beat=travel_by_beat,
        travel_zone=travel_zone,
        tq_bar=tq_bar,
        mean_queue_delay=float(mean_queue_delay),
        response_by_beat=response_by_beat,
        response_zone=float(response_zone),
        unit_workload=unit_workload,
        zone_workload=zone_workload,
        zone_workload_hours_per_year=zone_workload * HOURS_PER_YEAR,
    )


def export_matrix_market(zq: ZoneQueue, path: str) -> None:
    """Debug dump of the unsaturated-state generator in MatrixMarket format."""
    from scipy.io import mmwrite

    mmwrite(path, build_transition_matrix(zq).tocoo())
