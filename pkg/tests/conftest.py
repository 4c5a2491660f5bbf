import numpy as np
import pytest

from zonedesign.geo import CityGraph, Design


def make_grid_city(n: int, spacing_km: float = 1.0) -> CityGraph:
    """n x n rook-adjacency grid of unit-square beats, ids b<row><col>."""
    beats = []
    coords = {}
    adj = set()
    for r in range(n):
        for c in range(n):
            beat = f"b{r}{c}"
            beats.append(beat)
            coords[beat] = (c * spacing_km, r * spacing_km)
            if c + 1 < n:
                adj.add((beat, f"b{r}{c + 1}"))
            if r + 1 < n:
                adj.add((beat, f"b{r + 1}{c}"))
    ordered = sorted(beats)
    l = np.zeros((len(ordered), len(ordered)))
    for i, a in enumerate(ordered):
        for j, b in enumerate(ordered):
            dx = coords[a][0] - coords[b][0]
            dy = coords[a][1] - coords[b][1]
            l[i, j] = dx * dx + dy * dy
    return CityGraph(
        beats=tuple(ordered),
        adjacency=frozenset((min(a, b), max(a, b)) for a, b in adj),
        area={b: spacing_km ** 2 for b in ordered},
        centroid_dist_sq=l,
    )


def column_strip_design(n: int, strips: list[list[int]], zone_names=None) -> Design:
    """Zones as vertical column strips of an n x n grid."""
    zone_names = zone_names or [f"Z{k + 1}" for k in range(len(strips))]
    assignment = {}
    for k, cols in enumerate(strips):
        for c in cols:
            for r in range(n):
                assignment[f"b{r}{c}"] = zone_names[k]
    return Design(assignment)


def grid_travel_matrix(city: CityGraph, seconds_per_km: float = 180.0,
                       base_seconds: float = 60.0) -> np.ndarray:
    """Planar travel times from centroid distances, strictly positive, no ties
    off the diagonal structure (distinct distances dominate)."""
    return base_seconds + seconds_per_km * np.sqrt(city.centroid_dist_sq)


@pytest.fixture(scope="session")
def grid5() -> CityGraph:
    return make_grid_city(5)


@pytest.fixture(scope="session")
def grid3() -> CityGraph:
    return make_grid_city(3)


@pytest.fixture(scope="session")
def base_design5() -> Design:
    return column_strip_design(5, [[0, 1], [2], [3, 4]])


def planted_imbalance_instance(city: CityGraph):
    """5x5 fixture with uniform per-beat demand: the middle single-column zone
    is underloaded, so shifting adjacent-column beats into it cuts the
    cross-zone workload variance by far more than 40%."""
    lam = np.full(city.n_beats, 0.5)
    mu = 0.8
    tau = grid_travel_matrix(city)
    return lam, mu, tau


def random_zone_queue(rng: np.random.Generator, n_units: int):
    """Random stable instance with moderate utilization (oracle-friendly tail)."""
    from zonedesign.hypercube import ZoneQueue

    mu = float(rng.uniform(0.8, 1.5))
    util = rng.uniform(0.2, 0.5)
    lam = rng.uniform(0.3, 1.0, n_units)
    lam *= util * n_units * mu / lam.sum()
    tau = rng.uniform(30.0, 900.0, (n_units, n_units))
    beats = tuple(f"u{i}" for i in range(n_units))
    return ZoneQueue(beats, lam, mu, tau)
