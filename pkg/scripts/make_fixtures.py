#!/usr/bin/env python3
"""Generate the bundled 5x5 synthetic city fixture.

Writes a GeoJSON city, adjacency, a 3-zone column-strip base design, three
years of synthetic call records (Poisson arrivals, exponential on-scene
times, travel times from the grid distances plus noise), covariates, and a
ready-to-run pipeline config. Deterministic for a fixed seed.
"""

import argparse
import csv
import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

GRID = 5
# eight years: the arrival regression has ~47 parameters on this grid and
# needs (len(YEARS)-1)*25 observations comfortably above that
YEARS = [2010, 2011, 2012, 2013, 2014, 2015, 2016, 2017]
MEAN_ON_SCENE_MIN = 31.2
# true generative coefficients for the rate process: an AR(1) own-beat term
# plus covariate dependence; covariates carry independent beat-year jitter so
# the regression columns are not collinear with the citywide trend
BETA0_TRUE = 0.3
BETA_POP = 4.5e-6
BETA_HOUSING = 2.0e-6
COVARIATE_JITTER = 0.15


def beat_id(r, c):
    return f"b{r}{c}"


def unit_square(x, y):
    return {"type": "Polygon",
            "coordinates": [[[x, y], [x + 1, y], [x + 1, y + 1], [x, y + 1], [x, y]]]}


def make_covariates(rng):
    """(years, beats, 3) array: population, housing units, median income.

    West-to-east gradient plus growth plus independent beat-year jitter."""
    cov = np.zeros((len(YEARS), GRID * GRID, 3))
    for b, (r, c) in enumerate((r, c) for r in range(GRID) for c in range(GRID)):
        pop = 2200 + 550 * c + 250 * (r == 2) + rng.uniform(0, 300)
        housing = pop * rng.uniform(0.38, 0.46)
        income = 45000 + 2500 * r + rng.uniform(0, 2000)
        for y in range(len(YEARS)):
            jitter = rng.lognormal(0.0, COVARIATE_JITTER, 3)
            cov[y, b] = (pop * 1.03 ** y * jitter[0],
                         housing * 1.025 ** y * jitter[1],
                         income * 1.015 ** y * jitter[2])
    return cov


def rate_table(cov, rng):
    """True per-beat-year rates following the AR-plus-covariates process."""
    n = GRID * GRID
    lam = np.zeros((len(YEARS), n))
    lam[0] = 0.008 + BETA_POP * cov[0, :, 0] + BETA_HOUSING * cov[0, :, 1]
    for y in range(1, len(YEARS)):
        lam[y] = (BETA0_TRUE * lam[y - 1]
                  + 0.7 * (BETA_POP * cov[y, :, 0] + BETA_HOUSING * cov[y, :, 1]))
    return lam


def write_city(out: Path):
    features = []
    for r in range(GRID):
        for c in range(GRID):
            features.append({
                "type": "Feature",
                "properties": {"beat_id": beat_id(r, c), "area_km2": 1.0},
                "geometry": unit_square(c, r),
            })
    (out / "city_5x5.geojson").write_text(
        json.dumps({"type": "FeatureCollection", "features": features}, indent=1))

    with open(out / "adjacency_5x5.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beat_a", "beat_b"])
        for r in range(GRID):
            for c in range(GRID):
                if c + 1 < GRID:
                    w.writerow([beat_id(r, c), beat_id(r, c + 1)])
                if r + 1 < GRID:
                    w.writerow([beat_id(r, c), beat_id(r + 1, c)])


def write_base_design(out: Path):
    strips = {0: "Z1", 1: "Z1", 2: "Z2", 3: "Z3", 4: "Z3"}
    with open(out / "base_design.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beat_id", "zone_id"])
        for r in range(GRID):
            for c in range(GRID):
                w.writerow([beat_id(r, c), strips[c]])


def write_calls(out: Path, lam_table, rng: np.random.Generator):
    beats = [beat_id(r, c) for r in range(GRID) for c in range(GRID)]
    coords = {beat_id(r, c): (c, r) for r in range(GRID) for c in range(GRID)}

    def tau_star(a, b):
        (xa, ya), (xb, yb) = coords[a], coords[b]
        return 60.0 + 180.0 * np.hypot(xa - xb, ya - yb)

    rows = []
    for y_i, year in enumerate(YEARS):
        start = datetime(year, 1, 1, tzinfo=timezone.utc)
        hours = (datetime(year + 1, 1, 1, tzinfo=timezone.utc) - start).total_seconds() / 3600
        for b_i, beat in enumerate(beats):
            lam = lam_table[y_i, b_i]
            n = rng.poisson(lam * hours)
            call_hours = np.sort(rng.uniform(0, hours, n))
            for t in call_hours:
                # responding unit: usually the home unit, sometimes a neighbor
                if rng.random() < 0.75:
                    origin = beat
                else:
                    r, c = int(beat[1]), int(beat[2])
                    nbrs = [beat_id(rr, cc) for rr, cc in
                            ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                            if 0 <= rr < GRID and 0 <= cc < GRID]
                    origin = nbrs[rng.integers(len(nbrs))]
                waiting = rng.exponential(90.0)
                travel = max(20.0, tau_star(origin, beat) + rng.normal(0.0, 30.0))
                on_scene = rng.exponential(MEAN_ON_SCENE_MIN * 60.0)
                call = start + timedelta(hours=float(t))
                dispatch = call + timedelta(seconds=float(waiting))
                arrive = dispatch + timedelta(seconds=float(travel))
                clear = arrive + timedelta(seconds=float(on_scene))
                priority = "high" if rng.random() < 0.25 else "low"
                rows.append((call, dispatch, arrive, clear, origin, beat, priority))
    rows.sort(key=lambda r: r[0])
    with open(out / "calls.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["call_time", "dispatch_time", "arrive_time", "clear_time",
                    "origin_beat", "incident_beat", "priority"])
        for call, dispatch, arrive, clear, origin, beat, priority in rows:
            w.writerow([call.isoformat(), dispatch.isoformat(), arrive.isoformat(),
                        clear.isoformat(), origin, beat, priority])
    return len(rows)


def write_covariates(out: Path, cov):
    beats = [beat_id(r, c) for r in range(GRID) for c in range(GRID)]
    with open(out / "covariates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beat_id", "year", "population", "housing_units", "median_income"])
        for b_i, beat in enumerate(beats):
            for y_i, year in enumerate(YEARS):
                w.writerow([beat, year, f"{cov[y_i, b_i, 0]:.1f}",
                            f"{cov[y_i, b_i, 1]:.1f}", f"{cov[y_i, b_i, 2]:.1f}"])


def write_config(out: Path, seed: int):
    config = {
        "city_geojson": str(out / "city_5x5.geojson"),
        "adjacency_csv": str(out / "adjacency_5x5.csv"),
        "base_design": str(out / "base_design.csv"),
        "calls_csv": str(out / "calls.csv"),
        "covariates_csv": str(out / "covariates.csv"),
        "output_dir": "out",
        "seed": seed,
        "p": 1,
        "horizon": 2,
        "sample_count": 150,
        "sample_max_shifts": 3,
        "max_shifts": 6,
        "iters_per_temp": 120,
        "max_temps": 25,
    }
    (out / "config.json").write_text(json.dumps(config, indent=1) + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    write_city(out)
    write_base_design(out)
    cov = make_covariates(rng)
    lam_table = rate_table(cov, rng)
    n_calls = write_calls(out, lam_table, rng)
    write_covariates(out, cov)
    write_config(out, args.seed)
    print(f"wrote fixture city ({GRID}x{GRID}), {n_calls} calls over {YEARS} -> {out}/")


if __name__ == "__main__":
    main()
