"""Districting search: simulated annealing over single-beat moves, plus the
full MILP formulation (linearized variance objective, network-flow contiguity,
compactness, practical constraints) exported in CPLEX LP format for external
solvers. The annealer is the default solve path; no MILP solver is bundled.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geo import (CityGraph, Design, DesignConstraints, design_diff,
                  is_compact, is_contiguous, validate_design)
from .surrogate import LinearWorkloadModel, approx_objective


@dataclass
class LinearConstraint:
    name: str
    coeffs: dict[str, float]
    sense: str           # "<=", ">=" or "="
    rhs: float

    def satisfied(self, values: dict[str, float], tol: float = 1e-9) -> bool:
        lhs = sum(c * values.get(v, 0.0) for v, c in self.coeffs.items())
        if self.sense == "<=":
            return lhs <= self.rhs + tol
        if self.sense == ">=":
            return lhs >= self.rhs - tol
        return abs(lhs - self.rhs) <= tol


@dataclass
class MilpModel:
    binaries: list[str]
    continuous: list[str]
    objective: dict[str, float]
    objective_constant: float
    constraints: list[LinearConstraint]
    var_kind: dict[str, tuple] = field(default_factory=dict)  # name -> semantic tuple

    def constraint_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for con in self.constraints:
            kind = con.name.split("[")[0]
            counts[kind] = counts.get(kind, 0) + 1
        return counts

    def objective_value(self, values: dict[str, float]) -> float:
        return sum(c * values.get(v, 0.0) for v, c in self.objective.items()) \
            + self.objective_constant


_SANITIZE = re.compile(r"[^A-Za-z0-9]")


def _clean(s: str) -> str:
    return _SANITIZE.sub("_", s)


def var_d(beat: str, zone: str) -> str:
    return f"d_{_clean(beat)}_{_clean(zone)}"


def var_e(i: str, k: str, j: str, kp: str) -> str:
    # 'y' prefix: LP-format names must not look like exponents
    return f"y_{_clean(i)}_{_clean(k)}_{_clean(j)}_{_clean(kp)}"


def var_h(beat: str, zone: str) -> str:
    return f"h_{_clean(beat)}_{_clean(zone)}"


def var_f(i: str, j: str, zone: str) -> str:
    return f"fl_{_clean(i)}_{_clean(j)}_{_clean(zone)}"


def build_milp(city: CityGraph, model: LinearWorkloadModel, base: Design,
               constraints: DesignConstraints) -> MilpModel:
    """Assemble the districting MILP around the fitted surrogate.

    The quadratic variance objective is expanded over products d_ik * d_jk',
    each represented by a McCormick-linearized variable; products with zero
    objective coefficient are emitted only if a compactness constraint needs
    them. The constant part of the objective is carried separately so LP
    objective values remain comparable to the surrogate objective.
    """
    zones = base.zones
    beats = city.beats
    k_count = len(zones)
    theta0 = np.array([model.theta0[z] for z in zones])
    theta = np.array([[model.theta[b][z] for z in zones] for b in beats])
    theta0_bar = theta0.mean()

    pinned_by_beat: dict[str, str] = {}
    for beat, zone in sorted(constraints.pinned):
        if beat in pinned_by_beat and pinned_by_beat[beat] != zone:
            raise ValueError(f"beat {beat} pinned to both {pinned_by_beat[beat]} and {zone}")
        pinned_by_beat[beat] = zone

    objective: dict[str, float] = {}
    constant = float(((theta0 - theta0_bar) ** 2).sum() / k_count)

    def add_obj(var: str, coef: float):
        if coef != 0.0:
            objective[var] = objective.get(var, 0.0) + coef

    for b_i, beat in enumerate(beats):
        for k_i, zone in enumerate(zones):
            add_obj(var_d(beat, zone), 2.0 / k_count * (theta0[k_i] - theta0_bar) * theta[b_i, k_i])

    # quadratic part: sum_{kk'} (delta_kk'/K - 1/K^2) t_k t_k'
    e_coef: dict[tuple[str, str, str, str], float] = {}
    for b_i, beat_i in enumerate(beats):
        for k_i, zone_k in enumerate(zones):
            if theta[b_i, k_i] == 0.0:
                continue
            for b_j, beat_j in enumerate(beats):
                for k_j, zone_kp in enumerate(zones):
                    if theta[b_j, k_j] == 0.0:
                        continue
                    w = theta[b_i, k_i] * theta[b_j, k_j] * (
                        (1.0 if k_i == k_j else 0.0) / k_count - 1.0 / k_count ** 2)
                    if w == 0.0:
                        continue
                    if b_i == b_j and k_i == k_j:
                        add_obj(var_d(beat_i, zone_k), w)      # d^2 = d
                    elif b_i == b_j:
                        continue                               # d_ik d_ik' = 0, partition
                    else:
                        key = min((beat_i, zone_k, beat_j, zone_kp),
                                  (beat_j, zone_kp, beat_i, zone_k))
                        e_coef[key] = e_coef.get(key, 0.0) + w

    # compactness rows force e_ijkk for pairs whose distance can bind
    compact_pairs = []
    for b_i, beat_i in enumerate(beats):
        for b_j in range(b_i + 1, len(beats)):
            beat_j = beats[b_j]
            l_ij = city.centroid_dist_sq[b_i, b_j]
            need_dist = l_ij > constraints.zeta1
            need_shape = l_ij > constraints.zeta2 * (city.area[beat_i] + city.area[beat_j])
            if need_dist or need_shape:
                compact_pairs.append((beat_i, beat_j, l_ij, need_dist, need_shape))

    e_vars: dict[tuple[str, str, str, str], str] = {}
    for key in sorted(e_coef):
        e_vars[key] = var_e(*key)
    for beat_i, beat_j, *_ in compact_pairs:
        for zone in zones:
            key = min((beat_i, zone, beat_j, zone), (beat_j, zone, beat_i, zone))
            e_vars.setdefault(key, var_e(*key))

    for key, coef in sorted(e_coef.items()):
        add_obj(e_vars[key], coef)

    cons: list[LinearConstraint] = []

    for beat in beats:
        cons.append(LinearConstraint(
            f"partition[{_clean(beat)}]",
            {var_d(beat, z): 1.0 for z in zones}, "=", 1.0))

    for key in sorted(e_vars):
        i, k, j, kp = key
        e = e_vars[key]
        di, dj = var_d(i, k), var_d(j, kp)
        tag = f"{_clean(i)}_{_clean(k)}_{_clean(j)}_{_clean(kp)}"
        cons.append(LinearConstraint(f"mccormick_ub1[{tag}]", {e: 1.0, di: -1.0}, "<=", 0.0))
        cons.append(LinearConstraint(f"mccormick_ub2[{tag}]", {e: 1.0, dj: -1.0}, "<=", 0.0))
        cons.append(LinearConstraint(f"mccormick_lb[{tag}]", {e: 1.0, di: -1.0, dj: -1.0}, ">=", -1.0))
        cons.append(LinearConstraint(f"mccormick_nonneg[{tag}]", {e: 1.0}, ">=", 0.0))

    for beat_i, beat_j, l_ij, need_dist, need_shape in compact_pairs:
        for zone in zones:
            key = min((beat_i, zone, beat_j, zone), (beat_j, zone, beat_i, zone))
            e = e_vars[key]
            tag = f"{_clean(beat_i)}_{_clean(beat_j)}_{_clean(zone)}"
            if need_dist:
                cons.append(LinearConstraint(
                    f"compact_dist[{tag}]", {e: l_ij}, "<=", constraints.zeta1))
            if need_shape:
                coeffs = {e: l_ij}
                for beat in beats:
                    coeffs[var_d(beat, zone)] = -constraints.zeta2 * city.area[beat]
                cons.append(LinearConstraint(f"compact_shape[{tag}]", coeffs, "<=", 0.0))

    # network-flow contiguity
    arcs = []
    for a, b in sorted(city.adjacency):
        arcs.append((a, b))
        arcs.append((b, a))
    arcs.sort()
    n_max = constraints.n_max
    for zone in zones:
        for beat in beats:
            coeffs: dict[str, float] = {}
            for i, j in arcs:
                if i == beat:
                    coeffs[var_f(i, j, zone)] = coeffs.get(var_f(i, j, zone), 0.0) + 1.0
                if j == beat:
                    coeffs[var_f(i, j, zone)] = coeffs.get(var_f(i, j, zone), 0.0) - 1.0
            coeffs[var_d(beat, zone)] = -1.0
            coeffs[var_h(beat, zone)] = float(n_max)
            cons.append(LinearConstraint(
                f"flow_balance[{_clean(beat)}_{_clean(zone)}]", coeffs, ">=", 0.0))
        for i, j in arcs:
            cons.append(LinearConstraint(
                f"flow_capacity[{_clean(i)}_{_clean(j)}_{_clean(zone)}]",
                {var_f(i, j, zone): 1.0, var_f(j, i, zone): 1.0,
                 var_d(i, zone): -(n_max - 1.0)}, "<=", 0.0))
        cons.append(LinearConstraint(
            f"sink_unique[{_clean(zone)}]", {var_h(b, zone): 1.0 for b in beats}, "=", 1.0))
        for beat in beats:
            cons.append(LinearConstraint(
                f"sink_in_zone[{_clean(beat)}_{_clean(zone)}]",
                {var_h(beat, zone): 1.0, var_d(beat, zone): -1.0}, "<=", 0.0))

    cons.append(LinearConstraint(
        "shift_budget",
        {var_d(beat, base.zone_of(beat)): 1.0 for beat in beats},
        ">=", float(len(beats) - constraints.max_shifts)))

    for beat, zone in sorted(pinned_by_beat.items()):
        cons.append(LinearConstraint(
            f"pin[{_clean(beat)}]", {var_d(beat, zone): 1.0}, "=", 1.0))

    for zf, zt in sorted(constraints.forbidden_transfers):
        for beat in beats:
            if base.zone_of(beat) == zf:
                cons.append(LinearConstraint(
                    f"forbid[{_clean(beat)}_{_clean(zt)}]",
                    {var_d(beat, zt): 1.0}, "=", 0.0))

    binaries = [var_d(b, z) for b in beats for z in zones]
    binaries += [e_vars[k] for k in sorted(e_vars)]
    binaries += [var_h(b, z) for b in beats for z in zones]
    continuous = [var_f(i, j, z) for z in zones for i, j in arcs]

    var_kind: dict[str, tuple] = {}
    for b in beats:
        for z in zones:
            var_kind[var_d(b, z)] = ("d", b, z)
            var_kind[var_h(b, z)] = ("h", b, z)
    for key, name in e_vars.items():
        var_kind[name] = ("e",) + key
    for z in zones:
        for i, j in arcs:
            var_kind[var_f(i, j, z)] = ("f", i, j, z)

    return MilpModel(binaries, continuous, objective, constant, cons, var_kind)


def milp_assignment_values(milp: MilpModel, city: CityGraph, design: Design) -> dict[str, float]:
    """Binary variable values induced by a design (products set consistently)."""
    values: dict[str, float] = {}
    for name in milp.binaries:
        kind = milp.var_kind[name]
        if kind[0] == "d":
            values[name] = 1.0 if design.zone_of(kind[1]) == kind[2] else 0.0
        elif kind[0] == "e":
            _, i, k, j, kp = kind
            values[name] = 1.0 if (design.zone_of(i) == k and design.zone_of(j) == kp) else 0.0
    return values


def export_lp(milp: MilpModel, path: str) -> None:
    """Write the model in CPLEX LP syntax with deterministic ordering.

    The objective constant is recorded in a leading comment; add it back to a
    solver's objective value to compare with the surrogate objective.
    """
    def fmt(coef: float, name: str, first: bool) -> str:
        sign = "-" if coef < 0 else ("" if first else "+")
        mag = abs(coef)
        return f"{sign} {mag:.12g} {name}"

    lines = [
        "\\ districting MILP (variance objective, McCormick-linearized)",
        f"\\ objective constant (add to objective values): {milp.objective_constant:.12g}",
        "Minimize",
    ]
    terms = [fmt(milp.objective[v], v, i == 0)
             for i, v in enumerate(sorted(milp.objective))]
    cur = " obj:"
    for term in terms or ["0 " + milp.binaries[0]]:
        if len(cur) + len(term) > 200:
            lines.append(cur)
            cur = "   "
        cur += " " + term
    lines.append(cur)
    lines.append("Subject To")
    for con in milp.constraints:
        cur = f" {con.name}:"
        for i, v in enumerate(sorted(con.coeffs)):
            term = fmt(con.coeffs[v], v, i == 0)
            if len(cur) + len(term) > 200:
                lines.append(cur)
                cur = "   "
            cur += " " + term
        sense = {"<=": "<=", ">=": ">=", "=": "="}[con.sense]
        cur += f" {sense} {con.rhs:.12g}"
        lines.append(cur)
    lines.append("Bounds")
    for v in milp.continuous:
        lines.append(f" 0 <= {v}")
    lines.append("Binary")
    for v in milp.binaries:
        lines.append(f" {v}")
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def verify_flow_contiguity(city: CityGraph, design: Design, n_max: int) -> bool:
    """Constructive feasibility of the flow formulation for every zone.

    Picks the lexicographically first beat of each zone as sink, routes one
    unit from every other member along a BFS spanning tree, and checks the
    balance/capacity/sink constraints numerically. Feasible iff each zone is
    connected and no larger than n_max.
    """
    for zone in design.zones:
        members = design.beats_in(zone)
        if not members:
            return False
        sink = members[0]
        member_set = set(members)
        parent: dict[str, str | None] = {sink: None}
        order = [sink]
        fringe = deque([sink])
        while fringe:
            cur = fringe.popleft()
            for nb in city.neighbors(cur):
                if nb in member_set and nb not in parent:
                    parent[nb] = cur
                    order.append(nb)
                    fringe.append(nb)
        if len(parent) != len(members):
            return False

        subtree = {b: 1 for b in members}
        for beat in reversed(order):
            if parent[beat] is not None:
                subtree[parent[beat]] += subtree[beat]
        flow: dict[tuple[str, str], float] = {}
        for beat in members:
            if parent[beat] is not None:
                flow[(beat, parent[beat])] = float(subtree[beat])

        # balance: net outflow = 1 for non-sinks, 1 - |zone| for the sink
        for beat in members:
            out = sum(v for (i, _), v in flow.items() if i == beat)
            inc = sum(v for (_, j), v in flow.items() if j == beat)
            required = 1.0 if beat != sink else 1.0 - n_max
            if out - inc < required - 1e-9:
                return False
        # capacity on every adjacent pair; positive flow only on in-zone tree edges
        for a, b in city.adjacency:
            f_ab = flow.get((a, b), 0.0) + flow.get((b, a), 0.0)
            cap_a = (n_max - 1.0) if a in member_set else 0.0
            cap_b = (n_max - 1.0) if b in member_set else 0.0
            if f_ab > min(cap_a, cap_b) + 1e-9:
                return False
    return True


@dataclass
class AnnealingConfig:
    initial_temp: float | None = None    # auto-calibrated when None
    cooling_rate: float = 0.95
    iters_per_temp: int = 200
    max_temps: int = 50
    stall_limit: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.cooling_rate < 1.0:
            raise ValueError("cooling_rate must be in (0, 1)")
        for name in ("iters_per_temp", "max_temps", "stall_limit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def feasibility_report(city: CityGraph, design: Design, base: Design,
                       constraints: DesignConstraints) -> dict[str, list[str]]:
    """Violations per constraint family; all-empty means feasible."""
    report: dict[str, list[str]] = {
        "validity": validate_design(city, design),
        "contiguity": [], "compactness": [], "size": [],
        "shift_budget": [], "pins": [], "forbidden_transfers": [],
    }
    if report["validity"]:
        return report
    conn = is_contiguous(city, design)
    report["contiguity"] = [f"zone {z} is disconnected" for z in design.zones if not conn[z]]
    comp = is_compact(city, design, constraints)
    report["compactness"] = [f"zone {z} violates compactness" for z in design.zones if not comp[z]]
    report["size"] = [
        f"zone {z} has {len(design.beats_in(z))} beats > n_max={constraints.n_max}"
        for z in design.zones if len(design.beats_in(z)) > constraints.n_max]
    shifts, moves = design_diff(base, design)
    if shifts > constraints.max_shifts:
        report["shift_budget"] = [
            f"{shifts} beats differ from base, budget is {constraints.max_shifts}"]
    for beat, zone in sorted(constraints.pinned):
        if design.zone_of(beat) != zone:
            report["pins"].append(f"beat {beat} must stay in zone {zone}")
    for beat, src, dst in moves:
        if (src, dst) in constraints.forbidden_transfers:
            report["forbidden_transfers"].append(
                f"beat {beat} may not move from zone {src} to zone {dst}")
    return report


def is_feasible(city: CityGraph, design: Design, base: Design,
                constraints: DesignConstraints) -> bool:
    return not any(feasibility_report(city, design, base, constraints).values())


def _candidate_moves(city: CityGraph, design: Design) -> list[tuple[str, str]]:
    moves = []
    for beat in city.beats:
        own = design.zone_of(beat)
        for target in sorted({design.zone_of(nb) for nb in city.neighbors(beat)} - {own}):
            moves.append((beat, target))
    return moves


def anneal(city: CityGraph, base: Design, evaluator, constraints: DesignConstraints,
           cfg: AnnealingConfig, on_temperature=None) -> tuple[Design, float, list[dict]]:
    """Metropolis search over single-beat reassignments to adjacent zones.

    Candidates violating any constraint are rejected outright. Returns the
    best feasible design ever visited (never worse than base, which starts as
    the incumbent), its objective, and a per-iteration trace. Bit-reproducible
    for a fixed seed.
    """
    base_report = feasibility_report(city, base, base, constraints)
    if any(base_report.values()):
        broken = [msg for msgs in base_report.values() for msg in msgs]
        raise ValueError("base design infeasible: " + "; ".join(broken))

    rng = np.random.default_rng(cfg.seed)
    current = base
    f_cur = evaluator(base)
    best, f_best = current, f_cur

    def feasible_moves(design: Design) -> list[tuple[str, str]]:
        out = []
        for beat, target in _candidate_moves(city, design):
            cand = design.with_move(beat, target)
            if is_feasible(city, cand, base, constraints):
                out.append((beat, target))
        return out

    temp = cfg.initial_temp
    if temp is None:
        uphill = []
        for beat, target in feasible_moves(base):
            delta = evaluator(base.with_move(beat, target)) - f_cur
            if delta > 0:
                uphill.append(delta)
        # ~80% initial acceptance of uphill moves; flat landscapes need no heat
        temp = (float(np.mean(uphill)) / math.log(1 / 0.8)) if uphill else 1.0

    trace: list[dict] = []
    iteration = 0
    stall = 0
    for t_idx in range(cfg.max_temps):
        improved = False
        for _ in range(cfg.iters_per_temp):
            iteration += 1
            moves = _candidate_moves(city, current)
            beat, target = moves[rng.integers(len(moves))]
            cand = current.with_move(beat, target)
            accepted = False
            if is_feasible(city, cand, base, constraints):
                f_cand = evaluator(cand)
                delta = f_cand - f_cur
                if delta <= 0.0 or rng.random() < math.exp(-delta / temp):
                    current, f_cur = cand, f_cand
                    accepted = True
                    if f_cur < f_best:
                        best, f_best = current, f_cur
                        improved = True
            trace.append({
                "iteration": iteration,
                "temperature": temp,
                "objective": f_cur,
                "accepted": accepted,
                "shifts_from_base": design_diff(base, current)[0],
            })
        stall = 0 if improved else stall + 1
        if on_temperature is not None:
            on_temperature(t_idx + 1, cfg.max_temps)
        if stall >= cfg.stall_limit:
            break
        temp *= cfg.cooling_rate
    return best, f_best, trace


def default_constraints(city: CityGraph, base: Design, max_shifts: int = 6,
                        pinned=(), forbidden_transfers=()) -> DesignConstraints:
    """Constraint defaults calibrated so the base design is feasible under them."""
    n_max = math.ceil(1.5 * city.n_beats / base.zone_count)
    l_max = 0.0
    ratio_max = 0.0
    for zone in base.zones:
        idx = [city.index(b) for b in base.beats_in(zone)]
        if len(idx) >= 2:
            sub = float(city.centroid_dist_sq[np.ix_(idx, idx)].max())
        else:
            sub = 0.0
        l_max = max(l_max, sub)
        area = sum(city.area[b] for b in base.beats_in(zone))
        ratio_max = max(ratio_max, sub / area)
    zeta1 = 1.2 * l_max if l_max > 0 else 1.0
    zeta2 = 1.2 * ratio_max if ratio_max > 0 else 1.0
    return DesignConstraints(max_shifts=max_shifts, n_max=n_max, zeta1=zeta1,
                             zeta2=zeta2, pinned=frozenset(pinned),
                             forbidden_transfers=frozenset(forbidden_transfers))


def exact_evaluator(city: CityGraph, lam: np.ndarray, mu: float, tau: np.ndarray, cache=None):
    """Objective callable backed by full queue solves (cached per zone)."""
    from .surrogate import ZoneWorkloadCache, workload_variance_of, zone_workloads

    if cache is None:
        cache = ZoneWorkloadCache()

    def evaluate(design: Design) -> float:
        return workload_variance_of(zone_workloads(city, design, lam, mu, tau, cache))

    return evaluate


def surrogate_evaluator(model: LinearWorkloadModel):
    def evaluate(design: Design) -> float:
        return approx_objective(design, model)

    return evaluate
