"""City substrate (beats, adjacency, geometry) and beat-to-zone designs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class UnknownBeatError(KeyError):
    """A design or query references a beat id the city does not contain."""


@dataclass(frozen=True)
class CityGraph:
    """Immutable city substrate.

    Beats are opaque string ids; matrix indexing follows the lexicographic
    order of ids, fixed here at construction. Adjacency is stored as
    unordered pairs (a, b) with a < b. ``centroid_dist_sq[i, j]`` is the
    squared centroid distance in km^2; ``area`` is per-beat km^2.
    """

    beats: tuple[str, ...]
    adjacency: frozenset[tuple[str, str]]
    area: dict[str, float]
    centroid_dist_sq: np.ndarray
    geometry: dict[str, dict] | None = None
    _index: dict[str, int] = field(init=False, repr=False)
    _neighbors: dict[str, tuple[str, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        beats = tuple(sorted(self.beats))
        object.__setattr__(self, "beats", beats)
        if len(set(beats)) != len(beats):
            raise ValueError("duplicate beat ids")
        idx = {b: i | 0 for i, b in enumerate(beats)}
        pairs = set()
        for a, b in self.adjacency:
            if a == b:
                raise ValueError(f"self-adjacency on beat {a!r}")
            if a not in idx or b not in idx:
                raise UnknownBeatError(f"adjacency references unknown beat: {(a, b)}")
            pairs.add((min(a, b), max(a, b)))
        object.__setattr__(self, "adjacency", frozenset(pairs))
        for b in beats:
            if b not in self.area:
                raise ValueError(f"missing area for beat {b!r}")
            if not self.area[b] > 0:
                raise ValueError(f"non-positive area for beat {b!r}")
        l = np.asarray(self.centroid_dist_sq, dtype=float)
        n = len(beats)
        if l.shape != (n, n):
            raise ValueError(f"centroid_dist_sq must be {n}x{n}, got {l.shape}")
        if (l < 0).any() or not np.allclose(l, l.T) or not np.allclose(np.diag(l), 0.0):
            raise ValueError("centroid_dist_sq must be symmetric, nonnegative, zero-diagonal")
        object.__setattr__(self, "centroid_dist_sq", l)
        object.__setattr__(self, "_index", idx)
        nbrs: dict[str, list[str]] = {b: [] for b in beats}
        for a, b in pairs:
            nbrs[a].append(b)
            nbrs[b].append(a)
        object.__setattr__(self, "_neighbors", {b: tuple(sorted(v)) for b, v in nbrs.items()})
        if n and not self._connected(set(beats)):
            raise ValueError("beat adjacency graph is not connected")

    def _connected(self, members: set[str]) -> bool:
        start = next(iter(sorted(members)))
        seen = {start}
        fringe = deque([start])
        while fringe:
            cur = fringe.popleft()
            for nb in self._neighbors[cur]:
                if nb in members and nb not in seen:
                    seen.add(nb)
                    fringe.append(nb)
        return len(seen) == len(members)

    def index(self, beat: str) -> int:
        try:
            return self._index[beat]
        except KeyError:
            raise UnknownBeatError(beat) from None

    def neighbors(self, beat: str) -> tuple[str, ...]:
        if beat not in self._index:
            raise UnknownBeatError(beat)
        return self._neighbors[beat]

    def dist_sq(self, a: str, b: str) -> float:
        return float(self.centroid_dist_sq[self.index(a), self.index(b)])

    @property
    def n_beats(self) -> int:
        return len(self.beats)


@dataclass(frozen=True)
class Design:
    """Beat-to-zone assignment. May be invalid; see :func:`validate_design`.

    ``zones`` fixes the zone universe (so an empty zone is representable);
    it defaults to the sorted distinct assigned zones.
    """

    assignment: dict[str, str]
    zones: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "assignment", dict(self.assignment))
        zones = self.zones or tuple(sorted(set(self.assignment.values())))
        object.__setattr__(self, "zones", tuple(sorted(zones)))

    @property
    def zone_count(self) -> int:
        return len(self.zones)

    def zone_of(self, beat: str) -> str:
        return self.assignment[beat]

    def beats_in(self, zone: str) -> tuple[str, ...]:
        return tuple(sorted(b for b, z in self.assignment.items() if z == zone))

    def with_move(self, beat: str, zone: str) -> "Design":
        new = dict(self.assignment)
        new[beat] = zone
        return Design(new, self.zones)

    def matrix(self, city: CityGraph) -> np.ndarray:
        """Binary I x K assignment matrix in city beat order / sorted zone order."""
        d = np.zeros((city.n_beats, self.zone_count), dtype=int)
        zcol = {z: k for k, z in enumerate(self.zones)}
        for beat, zone in self.assignment.items():
            d[city.index(beat), zcol[zone]] = 1
        return d


@dataclass(frozen=True)
class DesignConstraints:
    """Practical districting constraints applied relative to a baseline design."""

    max_shifts: int
    n_max: int
    zeta1: float
    zeta2: float
    pinned: frozenset[tuple[str, str]] = frozenset()
    forbidden_transfers: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        if self.max_shifts < 0:
            raise ValueError("max_shifts must be >= 0")
        if not (self.zeta1 > 0 and self.zeta2 > 0):
            raise ValueError("zeta1 and zeta2 must be positive")
        object.__setattr__(self, "pinned", frozenset(self.pinned))
        object.__setattr__(self, "forbidden_transfers", frozenset(self.forbidden_transfers))


def validate_design(city: CityGraph, design: Design) -> list[str]:
    """Check the partition invariant; return violation strings ([] means ok).

    Unknown beat ids are a structural error (raised), not a violation.
    """
    for beat in design.assignment:
        if beat not in city._index:
            raise UnknownBeatError(beat)
    violations = []
    for beat in city.beats:
        if beat not in design.assignment:
            violations.append(f"unassigned beat: {beat}")
    counts = {z: 0 for z in design.zones}
    for beat, zone in design.assignment.items():
        if zone not in counts:
            violations.append(f"beat {beat} assigned to unknown zone {zone}")
        else:
            counts[zone] += 1
    for zone in design.zones:
        if counts.get(zone, 0) == 0:
            violations.append(f"empty zone: {zone}")
    return violations


def design_diff(a: Design, b: Design) -> tuple[int, list[tuple[str, str, str]]]:
    """Number of beats whose zone differs, with the (beat, from, to) moves."""
    if set(a.assignment) != set(b.assignment):
        raise ValueError("designs cover different beat sets")
    moves = [
        (beat, a.assignment[beat], b.assignment[beat])
        for beat in sorted(a.assignment)
        if a.assignment[beat] != b.assignment[beat]
    ]
    return len(moves), moves


def is_contiguous(city: CityGraph, design: Design) -> dict[str, bool]:
    """Per-zone connectivity of the induced adjacency subgraph (graph traversal)."""
    out = {}
    for zone in design.zones:
        members = set(design.beats_in(zone))
        if not members:
            out[zone] = False
            continue
        out[zone] = city._connected(members)
    return out


def is_compact(city: CityGraph, design: Design, constraints: DesignConstraints) -> dict[str, bool]:
    """Per-zone compactness: max in-zone l_ij <= zeta1 and <= zeta2 * zone area.

    Bounds are inclusive. A single-beat zone is compact (no pairs).
    """
    out = {}
    for zone in design.zones:
        members = design.beats_in(zone)
        idx = [city.index(b) for b in members]
        if len(idx) < 2:
            out[zone] = True
            continue
        sub = city.centroid_dist_sq[np.ix_(idx, idx)]
        l_max = float(sub.max())
        zone_area = sum(city.area[b] for b in members)
        out[zone] = (l_max <= constraints.zeta1) and (l_max <= constraints.zeta2 * zone_area)
    return out


def derive_adjacency_from_geometry(features: list[dict]) -> set[tuple[str, str]]:
    """Adjacency pairs from polygon features sharing a boundary of positive length."""
    from shapely.geometry import shape

    geoms = {}
    for feat in features:
        beat = feat["properties"]["beat_id"]
        geoms[beat] = shape(feat["geometry"])
    pairs = set()
    ids = sorted(geoms)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            inter = geoms[a].boundary.intersection(geoms[b].boundary)
            if inter.length > 0:
                pairs.add((a, b))
    return pairs
