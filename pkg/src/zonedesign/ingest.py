"""File ingestion with per-row error accounting.

All inputs are UTF-8 CSV with a header row, except city geometry (GeoJSON).
Rows are rejected, never repaired: a record with an impossible timeline or an
unknown beat is counted under its reason and dropped.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .estimate import CallRecord
from .geo import CityGraph, Design, derive_adjacency_from_geometry

CALLS_HEADER = ["call_time", "dispatch_time", "arrive_time", "clear_time",
                "origin_beat", "incident_beat", "priority"]


class HeaderError(ValueError):
    """The file's header row does not match the expected schema."""


class AcceptanceThresholdError(RuntimeError):
    """Too many rows were rejected for the pipeline to proceed."""


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_accepted: int = 0
    reasons: dict[str, int] = field(default_factory=dict)

    @property
    def rows_rejected(self) -> int:
        return sum(self.reasons.values())

    def reject(self, reason: str):
        self.reasons[reason] = self.reasons.get(reason, 0) + 1

    def as_dict(self) -> dict:
        return {"rows_read": self.rows_read, "rows_accepted": self.rows_accepted,
                "rows_rejected": self.rows_rejected, "reasons": dict(sorted(self.reasons.items()))}


def parse_rfc3339(text: str) -> datetime:
    """Timestamp with a required UTC offset; naive timestamps are rejected."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError(f"naive timestamp (no offset): {text}")
    return ts


def open_csv(path: str):
    """Open a CSV for reading, skipping leading '#' comment lines (pipeline
    artifacts embed their config hash that way; plain input files have none)."""
    fh = open(path, newline="", encoding="utf-8")
    while True:
        pos = fh.tell()
        line = fh.readline()
        if not line.startswith("#"):
            fh.seek(pos)
            return fh


def ingest_calls(path: str, city: CityGraph) -> tuple[list[CallRecord], IngestReport]:
    """Parse a call-record CSV; returns accepted records plus the reject accounting."""
    report = IngestReport()
    records: list[CallRecord] = []
    with open_csv(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != CALLS_HEADER:
            raise HeaderError(
                f"expected header {','.join(CALLS_HEADER)}, got {reader.fieldnames}")
        for row in reader:
            report.rows_read += 1
            if any(not (row.get(f) or "").strip() for f in CALLS_HEADER[:6]):
                report.reject("missing field")
                continue
            try:
                times = [parse_rfc3339(row[f]) for f in CALLS_HEADER[:4]]
            except ValueError:
                report.reject("bad timestamp")
                continue
            unknown = [b for b in (row["origin_beat"].strip(), row["incident_beat"].strip())
                       if b not in city.beats]
            if unknown:
                report.reject(f"unknown beat: {unknown[0]}")
                continue
            try:
                rec = CallRecord(*times, row["origin_beat"].strip(),
                                 row["incident_beat"].strip(),
                                 (row.get("priority") or "").strip())
            except ValueError:
                report.reject("timeline violation")
                continue
            records.append(rec)
            report.rows_accepted += 1
    return records, report


def require_acceptance(report: IngestReport, min_rate: float = 0.99) -> None:
    """Abort the pipeline when the accepted-row share falls below ``min_rate``."""
    if report.rows_read == 0:
        raise AcceptanceThresholdError("no rows read")
    rate = report.rows_accepted / report.rows_read
    if rate < min_rate:
        raise AcceptanceThresholdError(
            f"accepted {rate:.1%} of rows, below the {min_rate:.0%} threshold; "
            f"reject reasons: {report.as_dict()['reasons']}")


@dataclass
class CovariateTable:
    beats: tuple[str, ...]
    years: list[int]
    factors: list[str]
    values: np.ndarray              # (years, beats, factors)
    filled: list[tuple[str, int]]   # carried-forward beat-year cells
    report: IngestReport = field(default_factory=IngestReport)


def ingest_covariates(path: str, city: CityGraph, years: list[int]) -> CovariateTable:
    """Dense per-beat-year covariate table.

    Missing beat-year cells are filled per beat by carrying the last
    observation forward (flagged); a beat with no observation in any year is
    an error. Rows with non-numeric factor cells are rejected.
    """
    report = IngestReport()
    with open_csv(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["beat_id", "year"]:
            raise HeaderError("covariate header must start with beat_id,year")
        factors = [f for f in reader.fieldnames[2:] if f]
        if not factors:
            raise HeaderError("covariate file needs at least one factor column")
        raw: dict[tuple[str, int], list[float]] = {}
        for row in reader:
            report.rows_read += 1
            beat = (row.get("beat_id") or "").strip()
            if beat not in city.beats:
                report.reject(f"unknown beat: {beat}")
                continue
            try:
                year = int(row["year"])
                vals = [float(row[f]) for f in factors]
            except (TypeError, ValueError):
                report.reject("non-numeric cell")
                continue
            raw[(beat, year)] = vals
            report.rows_accepted += 1

    values = np.full((len(years), city.n_beats, len(factors)), np.nan)
    for (beat, year), vals in raw.items():
        if year in years:
            values[years.index(year), city.index(beat)] = vals
    filled = []
    for b_i, beat in enumerate(city.beats):
        observed = [y_i for y_i in range(len(years)) if not np.isnan(values[y_i, b_i]).any()]
        if not observed:
            raise ValueError(f"beat {beat} has no covariates in any requested year")
        for y_i in range(len(years)):
            if np.isnan(values[y_i, b_i]).any():
                prior = [o for o in observed if o < y_i]
                source = max(prior) if prior else min(observed)
                values[y_i, b_i] = values[source, b_i]
                filled.append((beat, years[y_i]))
    return CovariateTable(city.beats, list(years), factors, values, sorted(filled), report)


def load_city(geojson_path: str, adjacency_csv: str | None = None) -> CityGraph:
    """CityGraph from a GeoJSON FeatureCollection plus optional adjacency CSV.

    Areas default to the polygon area, centroids to the planar polygon
    centroid. An explicit adjacency file wins over shared-boundary derivation.
    """
    from shapely.geometry import shape

    with open(geojson_path, encoding="utf-8") as fh:
        collection = json.load(fh)
    if collection.get("type") != "FeatureCollection":
        raise ValueError("city file must be a GeoJSON FeatureCollection")
    features = collection["features"]
    beats = []
    area = {}
    centroids = {}
    geometry = {}
    for feat in features:
        beat = str(feat["properties"]["beat_id"])
        beats.append(beat)
        geom = shape(feat["geometry"])
        area[beat] = float(feat["properties"].get("area_km2") or geom.area)
        centroids[beat] = (geom.centroid.x, geom.centroid.y)
        geometry[beat] = feat["geometry"]

    if adjacency_csv is not None:
        pairs = set()
        with open_csv(adjacency_csv) as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["beat_a", "beat_b"]:
                raise HeaderError("adjacency header must be beat_a,beat_b")
            for row in reader:
                a, b = row["beat_a"].strip(), row["beat_b"].strip()
                pairs.add((min(a, b), max(a, b)))
    else:
        pairs = derive_adjacency_from_geometry(features)

    ordered = sorted(beats)
    n = len(ordered)
    l = np.zeros((n, n))
    for i, a in enumerate(ordered):
        for j, b in enumerate(ordered):
            dx = centroids[a][0] - centroids[b][0]
            dy = centroids[a][1] - centroids[b][1]
            l[i, j] = dx * dx + dy * dy
    return CityGraph(tuple(ordered), frozenset(pairs), area, l, geometry)


def load_design(path: str, city: CityGraph) -> Design:
    """Design from a beat_id,zone_id CSV; duplicate beat rows are an error."""
    assignment: dict[str, str] = {}
    with open_csv(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["beat_id", "zone_id"]:
            raise HeaderError("design header must be beat_id,zone_id")
        for row in reader:
            beat = row["beat_id"].strip()
            if beat in assignment:
                raise ValueError(f"beat {beat} assigned more than once")
            assignment[beat] = row["zone_id"].strip()
    return Design(assignment)


def save_design(design: Design, path: str, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["beat_id", "zone_id"])
        for beat in sorted(design.assignment):
            writer.writerow([beat, design.assignment[beat]])
