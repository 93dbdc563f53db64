"""Individual behavioural measures and home-tower detection.

SV  number of reciprocated contacts (degree in the call graph)
SD  call entropy over contacts, normalised by log(degree)
MV  radius of gyration of the visited towers, in km
MD  entropy of origin-destination trips, normalised by log(trip count)

Natural logarithms throughout; normalised entropies do not depend on the base.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._parallel import blocks, ordered_map
from .ingest import MINUTES_PER_DAY, CallGraph, Trajectories, Trajectory, TowerTable

EARTH_RADIUS_KM = 6371.0088
NIGHT = (22 * 60, 7 * 60)  # [22:00, 07:00) in minutes of the day


class UnknownUserError(KeyError):
    """A measure was requested for a user the earlier stages never produced."""


@dataclass
class UserProfile:
    user_id: str
    social_volume: int
    social_diversity: float
    mobility_volume: float
    mobility_diversity: float
    home_tower: str
    trip_counts: dict[tuple[str, str], int] = field(default_factory=dict)
    contact_calls: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.contact_calls and self.social_volume != len(self.contact_calls):
            raise ValueError("social volume must equal the number of contacts")


def _normalised_entropy(counts, norm: float) -> float:
    counts = np.asarray([c for c in counts if c > 0], dtype=float)
    if len(counts) <= 1 or norm <= 1:
        return 0.0
    total = counts.sum()
    h = math.log(total) - float(np.dot(counts, np.log(counts))) / total
    return min(max(h / math.log(norm), 0.0), 1.0)


def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(a, dtype=float)) for a in (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def _lookup(graph: CallGraph, u: str) -> None:
    if u not in graph:
        raise UnknownUserError(f"user {u!r} has no entry in the call graph; was it filtered out upstream?")


def social_volume(graph: CallGraph, u: str) -> int:
    _lookup(graph, u)
    return graph.degree(u)


def social_diversity(graph: CallGraph, u: str) -> float:
    _lookup(graph, u)
    calls = graph.contact_calls(u)
    return _normalised_entropy(calls.values(), len(calls))


def _visits(trajectory: Trajectory, towers: TowerTable):
    ids, n = np.unique(np.asarray(trajectory.towers, dtype=str), return_counts=True)
    coords = np.array([towers.coords(t) for t in ids], dtype=float).reshape(-1, 2)
    return ids, n.astype(float), coords[:, 0], coords[:, 1]


def mobility_volume(trajectory: Trajectory, towers: TowerTable) -> float:
    """Radius of gyration in km.

    The centre of mass is the visit-weighted mean position, taken in an
    equirectangular projection about the unweighted centroid of the
    visited towers; distances to it are haversine. Planar tower tables use
    plain Euclidean geometry.
    """
    if len(trajectory) == 0:
        raise ValueError(f"user {trajectory.user_id!r} has an empty trajectory")
    _, n, lat, lon = _visits(trajectory, towers)
    total = n.sum()
    if towers.planar:
        xc, yc = np.dot(n, lon) / total, np.dot(n, lat) / total
        d2 = (lon - xc) ** 2 + (lat - yc) ** 2
    else:
        lat0, lon0 = lat.mean(), lon.mean()
        k = math.cos(math.radians(lat0))
        x = EARTH_RADIUS_KM * np.radians(lon - lon0) * k
        y = EARTH_RADIUS_KM * np.radians(lat - lat0)
        lat_cm = lat0 + math.degrees(np.dot(n, y) / total / EARTH_RADIUS_KM)
        lon_cm = lon0 + math.degrees(np.dot(n, x) / total / (EARTH_RADIUS_KM * k))
        d2 = haversine_km(lat, lon, lat_cm, lon_cm) ** 2
    return math.sqrt(max(float(np.dot(n, d2)) / total, 0.0))


def trip_counts(trajectory: Trajectory) -> Counter:
    """Origin-destination counts of consecutive calls at distinct towers."""
    t = list(trajectory.towers)
    return Counter((a, b) for a, b in zip(t, t[1:]) if a != b)


def trip_entropy(trips: Counter | dict) -> float:
    """Normalised entropy of a trip multiset; zero for fewer than two trips."""
    return _normalised_entropy(trips.values(), sum(trips.values()))


def mobility_diversity(trajectory: Trajectory) -> float:
    return trip_entropy(trip_counts(trajectory))


def is_night(minutes, night: tuple[int, int] = NIGHT):
    tod = np.asarray(minutes) % MINUTES_PER_DAY
    start, end = night
    if start > end:
        return (tod >= start) | (tod < end)
    return (tod >= start) & (tod < end)


def home_tower(trajectory: Trajectory, night: tuple[int, int] = NIGHT) -> str:
    """Tower with the most night-time calls.

    Ties go to the tower with more calls overall, then to the smallest id.
    With no night-time calls at all the all-day counts decide alone.
    """
    if len(trajectory) == 0:
        raise ValueError(f"user {trajectory.user_id!r} has an empty trajectory")
    at_night = is_night(trajectory.minutes, night)
    total = Counter(trajectory.towers)
    nights = Counter(t for t, flag in zip(trajectory.towers, at_night) if flag)
    return min(total, key=lambda t: (-nights[t], -total[t], t))


def build_profile(trajectory: Trajectory, graph: CallGraph, towers: TowerTable, night=NIGHT) -> UserProfile:
    u = trajectory.user_id
    _lookup(graph, u)
    trips = trip_counts(trajectory)
    return UserProfile(
        user_id=u,
        social_volume=social_volume(graph, u),
        social_diversity=social_diversity(graph, u),
        mobility_volume=mobility_volume(trajectory, towers),
        mobility_diversity=trip_entropy(trips),
        home_tower=home_tower(trajectory, night),
        trip_counts=dict(trips),
        contact_calls=graph.contact_calls(u),
    )


@dataclass
class ProfileTable:
    """The four measures and home tower of every retained user, by sorted id."""

    user_ids: np.ndarray
    sv: np.ndarray
    sd: np.ndarray
    mv: np.ndarray
    md: np.ndarray
    home_tower: np.ndarray

    def __len__(self) -> int:
        return len(self.user_ids)

    def __getitem__(self, user_id: str) -> UserProfile:
        i = int(np.searchsorted(self.user_ids.astype(str), user_id))
        if i >= len(self.user_ids) or self.user_ids[i] != user_id:
            raise UnknownUserError(user_id)
        return UserProfile(user_id, int(self.sv[i]), float(self.sd[i]), float(self.mv[i]),
                           float(self.md[i]), self.home_tower[i])

    def values(self) -> np.ndarray:
        """``(n, 4)`` matrix with columns SV, SD, MV, MD."""
        return np.column_stack([self.sv.astype(float), self.sd, self.mv, self.md])


def _normalised_entropy_bulk(owner, counts, n_owner, norm):
    counts = counts.astype(float)
    total = np.bincount(owner, weights=counts, minlength=n_owner)
    s = np.bincount(owner, weights=counts * np.log(counts), minlength=n_owner)
    distinct = np.bincount(owner, minlength=n_owner)
    ok = (distinct >= 2) & (norm > 1)
    out = np.zeros(n_owner)
    tot = total[ok]
    out[ok] = (np.log(tot) - s[ok] / tot) / np.log(norm[ok])
    return np.clip(out, 0.0, 1.0)


def _mobility_block(args):
    traj, lat, lon, planar, night, lo, hi = args
    a, b = traj.offsets[lo], traj.offsets[hi]
    n_owner = hi - lo
    owner = np.repeat(np.arange(n_owner, dtype=np.int64), np.diff(traj.offsets[lo:hi + 1]))
    t = traj.tower[a:b].astype(np.int64)
    minutes = traj.minute[a:b]
    n_towers = max(len(traj.tower_ids), 1)

    # trips: consecutive events of one user at distinct towers
    valid = (owner[:-1] == owner[1:]) & (t[:-1] != t[1:])
    key = (owner[:-1][valid] * n_towers + t[:-1][valid]) * n_towers + t[1:][valid]
    trips, trip_n = np.unique(key, return_counts=True)
    trip_owner = trips // (n_towers * n_towers)
    n_trips = np.bincount(trip_owner, weights=trip_n, minlength=n_owner)
    md = _normalised_entropy_bulk(trip_owner, trip_n, n_owner, n_trips)

    # visits per (user, tower)
    pairs, inverse, visits = np.unique(owner * n_towers + t, return_inverse=True, return_counts=True)
    p_owner = pairs // n_towers
    p_tower = pairs % n_towers
    night_visits = np.bincount(inverse, weights=is_night(minutes, night).astype(float), minlength=len(pairs))

    order = np.lexsort((p_tower, -visits, -night_visits, p_owner))
    first = np.flatnonzero(np.r_[True, p_owner[order][1:] != p_owner[order][:-1]])
    home = p_tower[order][first]

    w = visits.astype(float)
    total = np.bincount(p_owner, weights=w, minlength=n_owner)
    plat, plon = lat[p_tower], lon[p_tower]
    if planar:
        xc = np.bincount(p_owner, weights=w * plon, minlength=n_owner) / total
        yc = np.bincount(p_owner, weights=w * plat, minlength=n_owner) / total
        d2 = (plon - xc[p_owner]) ** 2 + (plat - yc[p_owner]) ** 2
    else:
        distinct = np.bincount(p_owner, minlength=n_owner)
        lat0 = np.bincount(p_owner, weights=plat, minlength=n_owner) / distinct
        lon0 = np.bincount(p_owner, weights=plon, minlength=n_owner) / distinct
        k = np.cos(np.radians(lat0))
        x = EARTH_RADIUS_KM * np.radians(plon - lon0[p_owner]) * k[p_owner]
        y = EARTH_RADIUS_KM * np.radians(plat - lat0[p_owner])
        xc = np.bincount(p_owner, weights=w * x, minlength=n_owner) / total
        yc = np.bincount(p_owner, weights=w * y, minlength=n_owner) / total
        lat_cm = lat0 + np.degrees(yc / EARTH_RADIUS_KM)
        lon_cm = lon0 + np.degrees(xc / (EARTH_RADIUS_KM * k))
        d2 = haversine_km(plat, plon, lat_cm[p_owner], lon_cm[p_owner]) ** 2
    mv = np.sqrt(np.maximum(np.bincount(p_owner, weights=w * d2, minlength=n_owner) / total, 0.0))
    return md, mv, home


def compute_all_profiles(
    trajectories: Trajectories,
    graph: CallGraph,
    towers: TowerTable,
    night: tuple[int, int] = NIGHT,
    workers: int = 1,
    block_size: int = 32768,
) -> ProfileTable:
    """Measures for every user with a trajectory.

    Users are processed in fixed-size blocks; per-user sums never cross a
    block boundary, so the result does not depend on ``workers``.
    """
    if len(graph.user_ids) != len(trajectories.user_ids) or np.any(
        graph.user_ids.astype(str) != trajectories.user_ids.astype(str)
    ):
        raise UnknownUserError(
            "call graph and trajectories cover different user populations; "
            "build both from the same retained set"
        )
    if np.any(np.diff(trajectories.offsets) == 0):
        raise ValueError("every retained user needs at least one call")
    if not np.array_equal(towers.ids, trajectories.tower_ids):
        raise ValueError("trajectories were built against a different tower table")
    n = len(trajectories.user_ids)

    node, weight = graph.node_weights()
    sv = np.bincount(node, minlength=n).astype(np.int64)
    sd = _normalised_entropy_bulk(node, weight, n, sv.astype(float))

    parts = ordered_map(
        _mobility_block,
        [(trajectories, towers.lat, towers.lon, towers.planar, night, lo, hi) for lo, hi in blocks(n, block_size)],
        workers=workers,
    )
    if parts:
        md, mv, home = (np.concatenate(x) for x in zip(*parts))
    else:
        md = mv = np.zeros(0)
        home = np.zeros(0, dtype=np.int64)
    return ProfileTable(
        user_ids=trajectories.user_ids,
        sv=sv,
        sd=sd,
        mv=mv,
        md=md,
        home_tower=towers.ids[home] if n else np.zeros(0, dtype=object),
    )
