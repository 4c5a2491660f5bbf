"""Shared evaluation engine: run configuration, loaded artifacts, and the
design-evaluation logic that the CLI and the HTTP service both call, so a
number shown anywhere traces to exactly one computation."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analyze import variance_change, workload_variance
from .geo import CityGraph, Design, DesignConstraints, design_diff, validate_design
from .hypercube import HOURS_PER_YEAR, PerformanceReport, performance_report, solve_steady_state
from .optimize import AnnealingConfig, feasibility_report
from .surrogate import LinearWorkloadModel, zone_queue_for


class InvalidAssignmentError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class RunConfig:
    """One document that pins every input path, parameter, and seed of a run."""

    city_geojson: str
    base_design: str
    adjacency_csv: str | None = None
    calls_csv: str | None = None
    covariates_csv: str | None = None
    output_dir: str = "out"
    seed: int = 0
    # model
    p: int = 1
    kernel_theta: float | None = None
    mu_override: float | None = None
    service_includes_travel: bool = False
    horizon: int = 2
    # surrogate sampling
    sample_count: int = 500
    sample_max_shifts: int = 3
    # constraints (None -> calibrated from the base design)
    max_shifts: int = 6
    n_max: int | None = None
    zeta1: float | None = None
    zeta2: float | None = None
    pinned: list[list[str]] = field(default_factory=list)
    forbidden_transfers: list[list[str]] = field(default_factory=list)
    # annealing schedule
    initial_temp: float | None = None
    cooling_rate: float = 0.95
    iters_per_temp: int = 200
    max_temps: int = 50
    stall_limit: int = 10
    min_accept_rate: float = 0.99

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        doc = asdict(self)
        doc.pop("output_dir")  # where artifacts land is not part of the run identity
        canon = json.dumps(doc, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def annealing_config(self) -> AnnealingConfig:
        return AnnealingConfig(
            initial_temp=self.initial_temp, cooling_rate=self.cooling_rate,
            iters_per_temp=self.iters_per_temp, max_temps=self.max_temps,
            stall_limit=self.stall_limit, seed=self.seed)

    def resolve_constraints(self, city: CityGraph, base: Design) -> DesignConstraints:
        from .optimize import default_constraints

        auto = default_constraints(city, base, max_shifts=self.max_shifts)
        return DesignConstraints(
            max_shifts=self.max_shifts,
            n_max=self.n_max if self.n_max is not None else auto.n_max,
            zeta1=self.zeta1 if self.zeta1 is not None else auto.zeta1,
            zeta2=self.zeta2 if self.zeta2 is not None else auto.zeta2,
            pinned=frozenset(tuple(p) for p in self.pinned),
            forbidden_transfers=frozenset(tuple(t) for t in self.forbidden_transfers))


@dataclass
class Badge:
    constraint: str
    ok: bool
    detail: list[str]
    info: dict


@dataclass
class ZoneEvaluation:
    zone: str
    surrogate_workload: float
    surrogate_workload_hours: float
    exact_workload: float | None = None
    exact_workload_hours: float | None = None
    mean_travel_s: float | None = None
    mean_response_s: float | None = None


@dataclass
class EvaluationResponse:
    zones: list[ZoneEvaluation]
    surrogate_variance_hours: float
    surrogate_variance_vs_base_pct: float
    exact_variance_hours: float | None
    exact_variance_vs_base_pct: float | None
    shifts_from_base: int
    badges: list[Badge]


class Engine:
    """Immutable evaluation state plus a thread-safe per-zone solution cache."""

    def __init__(self, city: CityGraph, base: Design, lam: np.ndarray, mu: float,
                 tau: np.ndarray, surrogate: LinearWorkloadModel,
                 constraints: DesignConstraints):
        self.city = city
        self.base = base
        self.lam = np.asarray(lam, dtype=float)
        self.mu = float(mu)
        self.tau = np.asarray(tau, dtype=float)
        self.surrogate = surrogate
        self.constraints = constraints
        self._reports: dict[tuple[str, ...], PerformanceReport] = {}
        self._lock = threading.Lock()
        self._base_surrogate_variance = self._surrogate_variance_hours(base)

    def _zone_report(self, design: Design, zone: str) -> PerformanceReport:
        key = design.beats_in(zone)
        with self._lock:
            cached = self._reports.get(key)
        if cached is not None:
            return cached
        zq = zone_queue_for(self.city, design, zone, self.lam, self.mu, self.tau)
        rep = performance_report(zq, solve_steady_state(zq))
        with self._lock:
            self._reports[key] = rep
        return rep

    def _surrogate_variance_hours(self, design: Design) -> float:
        pred = self.surrogate.predict(design)
        return workload_variance([w * HOURS_PER_YEAR for w in pred.values()])

    def evaluate(self, assignment: dict[str, str], exact: bool = False) -> EvaluationResponse:
        design = Design(assignment, zones=self.base.zones)
        violations = validate_design(self.city, design)
        if violations:
            raise InvalidAssignmentError(violations)

        shifts, _ = design_diff(self.base, design)
        fr = feasibility_report(self.city, design, self.base, self.constraints)
        badges = []
        for kind in ("contiguity", "compactness", "size", "shift_budget",
                     "pins", "forbidden_transfers"):
            info = {}
            if kind == "shift_budget":
                info = {"used": shifts, "max": self.constraints.max_shifts}
            badges.append(Badge(kind, not fr[kind], fr[kind], info))

        pred = self.surrogate.predict(design)
        zones = []
        exact_hours = {}
        for zone in design.zones:
            ze = ZoneEvaluation(
                zone=zone,
                surrogate_workload=pred[zone],
                surrogate_workload_hours=pred[zone] * HOURS_PER_YEAR)
            if exact:
                rep = self._zone_report(design, zone)
                ze.exact_workload = rep.zone_workload
                ze.exact_workload_hours = rep.zone_workload_hours_per_year
                ze.mean_travel_s = rep.travel_zone
                ze.mean_response_s = rep.response_zone
                exact_hours[zone] = rep.zone_workload_hours_per_year
            zones.append(ze)

        s_var = self._surrogate_variance_hours(design)
        e_var = workload_variance(list(exact_hours.values())) if exact else None
        e_base = None
        if exact:
            base_hours = [self._zone_report(self.base, z).zone_workload_hours_per_year
                          for z in self.base.zones]
            e_base = variance_change(workload_variance(base_hours), e_var)
        return EvaluationResponse(
            zones=zones,
            surrogate_variance_hours=s_var,
            surrogate_variance_vs_base_pct=variance_change(self._base_surrogate_variance, s_var)
            if self._base_surrogate_variance > 0 else 0.0,
            exact_variance_hours=e_var,
            exact_variance_vs_base_pct=e_base,
            shifts_from_base=shifts,
            badges=badges,
        )


ARTIFACTS = {
    "ingest_report.json": "ingest",
    "calls_clean.csv": "ingest",
    "tau.csv": "estimate",
    "service_rate.json": "estimate",
    "arrival_model.json": "estimate",
    "rates_history.json": "estimate",
    "rates.json": "predict",
    "workloads.json": "simulate",
    "surrogate.json": "approx",
    "design_out.csv": "optimize",
    "trace.jsonl": "optimize",
    "milp.lp": "export-milp",
    "report.json": "evaluate",
    "did.csv": "did",
}


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path):
        producer = ARTIFACTS.get(path.name)
        hint = f"; run `zonedesign {producer}` first" if producer else ""
        super().__init__(f"missing artifact {path}{hint}")


def artifact_path(output_dir: str, name: str, must_exist: bool = False) -> Path:
    path = Path(output_dir) / name
    if must_exist and not path.exists():
        raise MissingArtifactError(path)
    return path


def write_json_artifact(path: Path, payload: dict, cfg: RunConfig) -> None:
    doc = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    doc.update(payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_json_artifact(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifactError(path)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def surrogate_to_dict(model: LinearWorkloadModel) -> dict:
    return {
        "theta0": model.theta0,
        "theta": model.theta,
        "r_squared": model.r_squared,
        "base_assignment": model.base_design.assignment,
        "zones": list(model.base_design.zones),
        "validity_radius": model.validity_radius,
        "unidentified": [list(u) for u in model.unidentified],
    }


def surrogate_from_dict(doc: dict) -> LinearWorkloadModel:
    base = Design(doc["base_assignment"], tuple(doc["zones"]))
    return LinearWorkloadModel(
        theta0=doc["theta0"],
        theta=doc["theta"],
        r_squared=doc["r_squared"],
        base_design=base,
        validity_radius=doc["validity_radius"],
        unidentified=[tuple(u) for u in doc["unidentified"]],
    )
