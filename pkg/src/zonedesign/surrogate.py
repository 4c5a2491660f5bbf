"""Local-linear surrogate of zone workload.

Workload is expensive to evaluate exactly (one stationary solve per distinct
zone), so designs near a base design are sampled by perturbing boundary
beats, evaluated through the queueing model with a zone-level cache, and a
per-zone least-squares fit of workload on the assignment indicators yields a
linear stand-in objective for the search.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .geo import CityGraph, Design, design_diff, is_contiguous, validate_design
from .hypercube import (UnstableZoneError, ZoneQueue, performance_report,
                        solve_steady_state)

log = logging.getLogger(__name__)


@dataclass
class DesignSample:
    design: Design
    workloads: dict[str, float]   # per-zone w^(k), dimensionless
    shifts_from_base: int


@dataclass
class LinearWorkloadModel:
    """w_hat^(k) = theta0[k] + sum_i theta[i][k] * d_ik around ``base_design``."""

    theta0: dict[str, float]
    theta: dict[str, dict[str, float]]       # beat -> zone -> coefficient
    r_squared: float
    base_design: Design
    validity_radius: int
    unidentified: list[tuple[str, str]] = field(default_factory=list)

    def predict(self, design: Design) -> dict[str, float]:
        out = {}
        for zone in self.base_design.zones:
            w = self.theta0[zone]
            for beat in design.beats_in(zone):
                w += self.theta[beat][zone]
            out[zone] = w
        return out


class ZoneWorkloadCache:
    """Zone solutions keyed by the zone's sorted beat tuple; thread-safe."""

    def __init__(self):
        self._data: dict[tuple[str, ...], float] = {}
        self._lock = threading.Lock()

    def get(self, key: tuple[str, ...]) -> float | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: tuple[str, ...], value: float) -> None:
        with self._lock:
            self._data[key] = value

    def __len__(self) -> int:
        return len(self._data)


def boundary_moves(city: CityGraph, design: Design) -> list[tuple[str, str]]:
    """Feasible single-beat moves: (beat, target zone) where the beat borders the
    target zone and moving it keeps every zone non-empty and contiguous."""
    moves = []
    zone_sizes = {z: len(design.beats_in(z)) for z in design.zones}
    for beat in city.beats:
        own = design.zone_of(beat)
        if zone_sizes[own] <= 1:
            continue
        targets = sorted({design.zone_of(nb) for nb in city.neighbors(beat)} - {own})
        for target in targets:
            cand = design.with_move(beat, target)
            conn = is_contiguous(city, cand)
            if conn[own] and conn[target]:
                moves.append((beat, target))
    return moves


def sample_perturbed_designs(base: Design, city: CityGraph, max_shifts: int,
                             count: int, seed: int) -> list[Design]:
    """Random valid contiguous designs within ``max_shifts`` boundary moves of base.

    Moves are drawn uniformly among currently feasible boundary moves; rejected
    intermediate states are resampled. Duplicates are removed, so fewer than
    ``count`` designs may come back on tiny cities.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if validate_design(city, base):
        raise ValueError("base design is invalid")
    if not all(is_contiguous(city, base).values()):
        raise ValueError("base design is not contiguous")
    if max_shifts == 0:
        return [base]
    if not boundary_moves(city, base):
        raise ValueError("no feasible boundary moves from the base design")

    rng = np.random.default_rng(seed)
    seen = {tuple(sorted(base.assignment.items()))}
    out = [base]
    attempts = 0
    max_attempts = 200 * count
    while len(out) < count and attempts < max_attempts:
        attempts += 1
        cand = base
        target_shifts = int(rng.integers(1, max_shifts + 1))
        for _ in range(target_shifts):
            moves = [m for m in boundary_moves(city, cand)
                     if design_diff(base, cand.with_move(*m))[0] <= max_shifts]
            if not moves:
                break
            beat, zone = moves[rng.integers(len(moves))]
            cand = cand.with_move(beat, zone)
        key = tuple(sorted(cand.assignment.items()))
        if key not in seen:
            seen.add(key)
            out.append(cand)
    return out


def zone_queue_for(city: CityGraph, design: Design, zone: str, lam: np.ndarray,
                   mu: float, tau: np.ndarray) -> ZoneQueue:
    """Zone-restricted queueing instance from citywide rate and travel arrays."""
    beats = design.beats_in(zone)
    idx = [city.index(b) for b in beats]
    return ZoneQueue(beats, lam[idx], mu, tau[np.ix_(idx, idx)])


def zone_workloads(city: CityGraph, design: Design, lam: np.ndarray, mu: float,
                   tau: np.ndarray, cache: ZoneWorkloadCache | None = None) -> dict[str, float]:
    """Per-zone total workload w^(k); solves only zones missing from the cache."""
    out = {}
    for zone in design.zones:
        key = design.beats_in(zone)
        cached = cache.get(key) if cache is not None else None
        if cached is not None:
            out[zone] = cached
            continue
        zq = zone_queue_for(city, design, zone, lam, mu, tau)
        rep = performance_report(zq, solve_steady_state(zq))
        out[zone] = rep.zone_workload
        if cache is not None:
            cache.put(key, rep.zone_workload)
    return out


def evaluate_designs(samples: list[Design], city: CityGraph, lam: np.ndarray,
                     mu: float, tau: np.ndarray,
                     cache: ZoneWorkloadCache | None = None) -> list[DesignSample]:
    """Workloads for each sampled design; unstable samples are dropped with a log line."""
    if cache is None:
        cache = ZoneWorkloadCache()
    base = samples[0]
    out = []
    for design in samples:
        try:
            w = zone_workloads(city, design, lam, mu, tau, cache)
        except UnstableZoneError as exc:
            log.warning("dropping sampled design: %s", exc)
            continue
        out.append(DesignSample(design, w, design_diff(base, design)[0]))
    return out


def fit_linear_model(samples: list[DesignSample], base: Design) -> LinearWorkloadModel:
    """Per-zone least squares of w^(k) on (1, d_1k, ..., d_Ik).

    Indicator columns that never vary across the samples are unidentifiable;
    their coefficients are zeroed (constants fold into the intercept) and the
    (beat, zone) pairs reported in ``unidentified``.
    """
    beats = sorted(base.assignment)
    n_beats = len(beats)
    if len(samples) < n_beats + 1:
        raise ValueError(f"need at least I+1={n_beats + 1} samples per zone, got {len(samples)}")
    distinct = {tuple(sorted(s.design.assignment.items())) for s in samples}
    if len(distinct) == 1:
        raise ValueError("degenerate sample set: all sampled designs identical")

    theta0: dict[str, float] = {}
    theta: dict[str, dict[str, float]] = {b: {} for b in beats}
    unidentified = []
    ss_res = 0.0
    ss_tot = 0.0
    n_samples = len(samples)
    for zone in base.zones:
        d = np.zeros((n_samples, n_beats))
        y = np.zeros(n_samples)
        for s_i, sample in enumerate(samples):
            y[s_i] = sample.workloads[zone]
            for b_i, beat in enumerate(beats):
                d[s_i, b_i] = 1.0 if sample.design.zone_of(beat) == zone else 0.0
        varying = [b_i for b_i in range(n_beats) if d[:, b_i].min() != d[:, b_i].max()]
        x = np.column_stack([np.ones(n_samples)] + [d[:, b_i] for b_i in varying])
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        theta0[zone] = float(coef[0])
        for b_i in range(n_beats):
            theta[beats[b_i]][zone] = 0.0
        for c, b_i in enumerate(varying):
            theta[beats[b_i]][zone] = float(coef[1 + c])
        always_in = [b_i for b_i in range(n_beats) if d[:, b_i].min() == 1.0]
        never_in = [b_i for b_i in range(n_beats) if d[:, b_i].max() == 0.0]
        for b_i in always_in + never_in:
            unidentified.append((beats[b_i], zone))
        resid = y - x @ coef
        ss_res += float(resid @ resid)
        ss_tot += float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("degenerate sample set: workloads carry no variation")
    if unidentified:
        log.warning("unidentified surrogate coefficients zeroed: %d (beats never "
                    "changing zone)", len(unidentified))
    r_squared = 1.0 - ss_res / ss_tot
    radius = max(s.shifts_from_base for s in samples)
    return LinearWorkloadModel(theta0, theta, r_squared, base, radius, sorted(unidentified))


def approx_objective(design: Design, model: LinearWorkloadModel) -> float:
    """Surrogate objective: population variance of the predicted zone workloads.

    Reported everywhere in the same divide-by-K scaling as the workload
    variance tables, so surrogate and measured numbers are directly
    comparable; a positive rescaling cannot change the argmin.
    """
    w = np.array([v for _, v in sorted(model.predict(design).items())])
    return float(((w - w.mean()) ** 2).mean())


def workload_variance_of(workloads: dict[str, float]) -> float:
    w = np.array([v for _, v in sorted(workloads.items())])
    return float(((w - w.mean()) ** 2).mean())
