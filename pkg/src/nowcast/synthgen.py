"""Synthetic CDR corpora with planted, known regional relationships.

Every retained user is built to hit a target social diversity (through
call counts over a circulant group of contacts) and a target mobility
diversity (through the mix of one dominant round trip and distinct
trips). Regional indicators are then planted as linear functions of the
regional mean mobility diversity the users actually realize.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import pyarrow as pa
from scipy.spatial import cKDTree

from ._io import atomic_write, dumps_json, fmt_array, write_csv, write_csv_table
from ._parallel import blocks, ordered_map
from ._rng import substream
from .ingest import CDR_COLUMNS, TOWER_COLUMNS, ObservationWindow, format_minutes, min_calls_retained
from .territory import MAPPING_COLUMNS, REGION_COLUMNS

DEPRIVATION_FIELDS = (
    "overcrowding",
    "no_electric_heating",
    "non_owner",
    "unemployment",
    "foreign_nationality",
    "no_car",
    "unskilled_worker",
    "household_6plus",
    "low_education",
    "single_parent",
)
DEPRIVATION_COEFFICIENTS = (0.11, 0.34, 0.55, 0.47, 0.23, 0.52, 0.37, 0.45, 0.19, 0.41)
DI_MAX = math.fsum(DEPRIVATION_COEFFICIENTS)

NIGHT_END = 420  # night calls are placed in [00:00, 07:00)
DAY_START, DAY_END = 420, 1320
EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class DeprivationInputs:
    overcrowding: float
    no_electric_heating: float
    non_owner: float
    unemployment: float
    foreign_nationality: float
    no_car: float
    unskilled_worker: float
    household_6plus: float
    low_education: float
    single_parent: float

    def __post_init__(self):
        for name in DEPRIVATION_FIELDS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a rate in [0, 1], got {v}")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in DEPRIVATION_FIELDS)


def deprivation_index(inputs: DeprivationInputs | Sequence[float]) -> float:
    """Weighted sum of the ten deprivation rates."""
    if not isinstance(inputs, DeprivationInputs):
        inputs = DeprivationInputs(*inputs)
    return math.fsum(c * v for c, v in zip(DEPRIVATION_COEFFICIENTS, inputs.as_tuple()))


def deprivation_inputs_for(di: float, rng: np.random.Generator) -> np.ndarray:
    """Ten rates in [0, 1] whose deprivation index equals ``di``.

    A uniform level di / 3.64 plus a random perturbation orthogonal to the
    coefficient vector, so the index is unchanged.
    """
    if not 0.0 <= di <= DI_MAX:
        raise ValueError(f"deprivation index {di} outside [0, {DI_MAX}]")
    c = np.array(DEPRIVATION_COEFFICIENTS)
    level = di / DI_MAX
    v = rng.normal(size=len(c))
    v -= (v @ c) / (c @ c) * c
    room = np.where(v > 0, (1 - level) / np.maximum(v, 1e-300), level / np.maximum(-v, 1e-300))
    scale = rng.uniform(0, 0.9) * float(room.min())
    return np.clip(level + scale * v, 0.0, 1.0)


@dataclass(frozen=True)
class GeneratorConfig:
    users: int = 200_000
    regions: int = 2_000
    towers_per_region: int = 8
    start: dt.date = dt.date(2007, 9, 1)
    days: int = 45
    min_rate: float = 0.5
    call_rate: tuple[float, float] = (0.6, 1.7)
    low_activity_fraction: float = 0.02
    md_level: tuple[float, float] = (0.35, 0.85)
    md_jitter: float = 0.05
    md_range: tuple[float, float] = (0.3, 0.97)
    tower_spread: tuple[float, float] = (1.0, 4.0)
    max_contacts: int = 8
    social_share: float = 0.6
    tolerance: float = 0.05
    di_intercept: float = 3.5
    di_slope: float = -3.0
    di_noise: float = 0.3
    pci_intercept: float = 5000.0
    pci_slope: float = 20000.0
    pci_noise: float = 2000.0
    population: tuple[int, int] = (1500, 60000)
    cell_deg: float = 0.05
    origin: tuple[float, float] = (46.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.users < 1:
            raise ValueError("users must be positive")
        if self.regions < 1 or self.towers_per_region < 1 or self.days < 1:
            raise ValueError("regions, towers_per_region and days must be positive")
        if self.users < self.regions:
            raise ValueError("need at least one user per region")
        if min(self.di_noise, self.pci_noise, self.md_jitter, self.low_activity_fraction) < 0:
            raise ValueError("noise levels and fractions must be non-negative")
        if self.population[0] <= 1000:
            raise ValueError("region populations must exceed 1000")

    @property
    def window(self) -> ObservationWindow:
        return ObservationWindow.of_length(self.start, self.days)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["start"] = self.start.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "start" in d and not isinstance(d["start"], dt.date):
            d["start"] = dt.date.fromisoformat(str(d["start"]))
        for k in ("call_rate", "md_level", "md_range", "tower_spread", "population", "origin"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


class InfeasibleTargetError(ValueError):
    pass


# mobility plans

def _entropy_norm(counts: np.ndarray, norm: float) -> float:
    counts = counts[counts > 0].astype(float)
    if len(counts) < 2 or norm < 2:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum() / math.log(norm))


def walk_md(n_trips: int, dominant: np.ndarray | int) -> np.ndarray:
    """Mobility diversity of a walk with ``dominant`` H<->A trips and the rest distinct."""
    d = np.atleast_1d(np.asarray(dominant, dtype=float))
    n = float(n_trips)
    if n_trips < 2:
        return np.zeros_like(d)
    a, b = np.ceil(d / 2), np.floor(d / 2)
    e = n - d
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(a > 0, a / n * np.log(a / n), 0.0) + np.where(b > 0, b / n * np.log(b / n), 0.0))
    h += e * (math.log(n) / n)  # each distinct trip contributes (1/n) ln n
    distinct = (a > 0) + (b > 0) + e
    return np.where(distinct > 1, h / math.log(n), 0.0)


def towers_for_trips(distinct: int) -> int:
    """Fewest towers whose complete digraph, minus the H<->A pair, has ``distinct`` edges."""
    if distinct <= 0:
        return 2
    t = 3
    while t * (t - 1) - 2 < distinct:
        t += 1
    return t


@dataclass(frozen=True)
class TripPlan:
    n_trips: int
    dominant: int
    n_towers: int
    md: float


def plan_trips(target_md: float, n_calls: int, max_towers: int, tolerance: float = 0.05,
               user: str = "?") -> TripPlan:
    """Choose the trip mix whose mobility diversity is closest to ``target_md``.

    A target of exactly 0 gives a single trip.
    """
    if target_md == 0:
        n = 1
    else:
        n = max(int(0.7 * n_calls) - 1, 1)
    n_towers = min(towers_for_trips(n), max_towers)
    if n_towers < 2:
        raise InfeasibleTargetError(f"user {user}: needs at least 2 towers, {max_towers} available")
    cap = n_towers * (n_towers - 1) - 2 if n_towers >= 3 else 0
    d = np.arange(max(n - cap, 0), n + 1)
    md = walk_md(n, d)
    i = int(np.argmin(np.abs(md - target_md)))
    if abs(md[i] - target_md) > tolerance:
        raise InfeasibleTargetError(
            f"user {user}: mobility diversity {target_md:.3f} unreachable with {n_towers} towers "
            f"and {n} trips (closest {md[i]:.3f})"
        )
    # the tower count depends on call volume only, not on the chosen mix
    return TripPlan(n, int(d[i]), n_towers, float(md[i]))


@lru_cache(maxsize=None)
def _euler_circuit(t: int) -> tuple[int, ...]:
    """Closed walk from node 0 using every edge of K_t (directed) except 0->1 and 1->0 once."""
    out = {v: [w for w in range(t) if w != v and {v, w} != {0, 1}][::-1] for v in range(t)}
    stack, circuit = [0], []
    while stack:
        v = stack[-1]
        if out[v]:
            stack.append(out[v].pop())
        else:
            circuit.append(stack.pop())
    return tuple(circuit[::-1])


def trip_walk(plan: TripPlan) -> np.ndarray:
    """Tower labels visited in order; 0 is home and 1 the dominant partner."""
    d, e = plan.dominant, plan.n_trips - plan.dominant
    walk = list(np.arange(d + 1) % 2)
    if e:
        circ = list(_euler_circuit(plan.n_towers))
        start = d % 2
        i = circ.index(start)
        rotated = circ[i:-1] + circ[:i] + [start]
        walk.extend(rotated[1: e + 1])
    return np.array(walk, dtype=np.int64)


def schedule_calls(walk: np.ndarray, n_calls: int, days: int, rng: np.random.Generator):
    """Spread ``n_calls`` over the stops of ``walk`` in time order.

    Up to ``days`` home stops become night stops, one per distinct day,
    and absorb the spare calls; every other stop gets one daytime call.
    Returns (stop index per call, minute offset from the window start).
    """
    stops = len(walk)
    if n_calls < stops:
        raise ValueError("fewer calls than stops")
    home = np.flatnonzero(walk == 0)
    b = min(len(home), days)
    night = home[(np.arange(b) * len(home)) // b]
    night_day = (np.arange(b) * days) // b
    per_stop = np.ones(stops, dtype=np.int64)
    extra = n_calls - stops
    per_stop[night] += extra // b + (np.arange(b) < extra % b)

    seg = np.searchsorted(night, np.arange(stops), side="right") - 1
    is_night = np.zeros(stops, dtype=bool)
    is_night[night] = True
    seg_end_day = np.append(night_day[1:], days)

    call_stop = np.repeat(np.arange(stops), per_stop)
    minute = np.empty(n_calls, dtype=np.int64)
    cn = is_night[call_stop]
    # night calls: any minute before 07:00 of the segment's first day, sorted per stop
    n_night = int(cn.sum())
    mod = rng.integers(0, NIGHT_END, size=n_night)
    ns = call_stop[cn]
    mod = mod[np.lexsort((mod, ns))]
    minute[cn] = night_day[seg[ns]] * 1440 + mod
    # day stops: sorted daytime slots across the days the segment spans
    ds = call_stop[~cn]
    if len(ds):
        s = seg[ds]
        span = (seg_end_day[s] - night_day[s]) * (DAY_END - DAY_START)
        u = rng.random(len(ds))
        u = u[np.lexsort((u, s))]
        slot = np.minimum((u * span).astype(np.int64), span - 1)
        minute[~cn] = (night_day[s] + slot // (DAY_END - DAY_START)) * 1440 + DAY_START + slot % (DAY_END - DAY_START)
    return call_stop, minute


# social groups

def _contact_weights(k: int, q) -> np.ndarray:
    """Weights q^(offset - 1) per contact; one row per value of ``q``."""
    q = np.atleast_1d(np.asarray(q, dtype=float))[:, None]
    half = k // 2
    expo = np.repeat(np.arange(half), 2)
    if k % 2:
        expo = np.append(expo, half)
    return q ** expo[None, :]


@lru_cache(maxsize=None)
def _count_options(k: int, budget: int) -> tuple[np.ndarray, np.ndarray]:
    """Achievable (SD, per-contact counts) for k contacts and a call budget, by SD.

    Geometric weights over a fine q grid, rounded to integer counts of at
    least one call.
    """
    w = _contact_weights(k, np.linspace(1e-3, 1.0, 4000))
    counts = np.maximum(np.rint(budget * w / w.sum(axis=1, keepdims=True)).astype(np.int64), 1)
    counts = np.unique(counts, axis=0)
    if k > 1:
        p = counts / counts.sum(axis=1, keepdims=True)
        sd = -(p * np.log(p)).sum(axis=1) / math.log(k)
    else:
        sd = np.zeros(len(counts))
    order = np.argsort(sd, kind="stable")
    return sd[order], counts[order]


def circulant_offsets(k: int, size: int) -> np.ndarray:
    """Offsets (+-1, +-2, ..., and size/2 for odd k) matching _contact_weights order."""
    half = k // 2
    offs = np.ravel(np.column_stack([np.arange(1, half + 1), -np.arange(1, half + 1)]))
    if k % 2:
        offs = np.append(offs, size // 2)
    return offs.astype(np.int64)


@dataclass
class SocialPlan:
    degree: np.ndarray
    target_sd: np.ndarray
    realized_sd: np.ndarray
    ptr: np.ndarray  # CSR over users
    contacts: np.ndarray
    counts: np.ndarray


def plan_social(n_calls: np.ndarray, max_contacts: int, share: float, tolerance: float,
                rng: np.random.Generator) -> SocialPlan:
    """Circulant contact groups per degree with geometric call allocations.

    Users of equal degree k are cut into groups of an even size >= k + 2;
    member i calls members i +- 1, ..., i +- k/2 (and the opposite member
    when k is odd) with the same counts the contacts return, so every edge
    is reciprocated. Users left over from a partial group get no contacts.
    """
    n = len(n_calls)
    wanted = rng.integers(0, max_contacts + 1, size=n)
    degree = np.zeros(n, dtype=np.int64)
    target = np.zeros(n)
    realized = np.zeros(n)
    lists = [None] * n
    for k in range(1, max_contacts + 1):
        members = np.flatnonzero(wanted == k)
        size = max(10, k + 2)
        size += size % 2
        groups = len(members) // size
        for g in range(groups):
            m = members[g * size:(g + 1) * size]
            budget = int(share * n_calls[m].min())
            sds, options = _count_options(k, budget)
            if k == 1:
                goal = 0.0
            elif k == 2:
                goal = 1.0
            else:
                # integer counts leave gaps in the reachable values: redraw goals that fall in one
                for _ in range(1000):
                    goal = float(np.clip(rng.uniform(0.3, 1.0), sds[0], sds[-1]))
                    if np.min(np.abs(sds - goal)) <= tolerance:
                        break
            j = int(np.argmin(np.abs(sds - goal)))
            if abs(sds[j] - goal) > tolerance:
                raise InfeasibleTargetError(f"social diversity {goal:.3f} unreachable for degree {k}")
            counts = options[j]
            offs = circulant_offsets(k, size)
            pos = np.arange(size)
            for i in range(size):
                lists[m[i]] = (m[(pos[i] + offs) % size], counts)
            degree[m] = k
            target[m] = goal
            realized[m] = sds[j]
    ptr = np.zeros(n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([0 if x is None else len(x[0]) for x in lists])
    contacts = np.concatenate([x[0] for x in lists if x is not None] or [np.zeros(0, np.int64)])
    counts = np.concatenate([x[1] for x in lists if x is not None] or [np.zeros(0, np.int64)])
    return SocialPlan(degree, target, realized, ptr, contacts, counts)


# corpus

@dataclass
class Layout:
    region_ids: np.ndarray
    tower_ids: np.ndarray
    tower_region: np.ndarray
    tower_lat: np.ndarray
    tower_lon: np.ndarray
    cell_lat: np.ndarray  # south-west corner per region
    cell_lon: np.ndarray
    area_km2: np.ndarray
    population: np.ndarray


def _ids(prefix: str, n: int, width: int) -> np.ndarray:
    w = max(width, len(str(max(n - 1, 0))))
    return np.array([f"{prefix}{i:0{w}d}" for i in range(n)], dtype=object)


def build_layout(cfg: GeneratorConfig) -> Layout:
    rng = substream(cfg.seed, "layout")
    r, tpr, cell = cfg.regions, cfg.towers_per_region, cfg.cell_deg
    cols = math.ceil(math.sqrt(r))
    idx = np.arange(r)
    cell_lat = cfg.origin[0] + (idx // cols) * cell
    cell_lon = cfg.origin[1] + (idx % cols) * cell
    tower_region = np.repeat(idx, tpr)
    tlat = cell_lat[tower_region] + rng.uniform(0.1, 0.9, r * tpr) * cell
    tlon = cell_lon[tower_region] + rng.uniform(0.1, 0.9, r * tpr) * cell
    km = EARTH_RADIUS_KM * math.pi / 180
    area = (cell * km) * (cell * km) * np.cos(np.radians(cell_lat + cell / 2))
    pop = rng.integers(cfg.population[0], cfg.population[1] + 1, size=r)
    return Layout(_ids("R", r, 4), _ids("T", r * tpr, 5), tower_region, tlat, tlon, cell_lat, cell_lon, area, pop)


def _user_block(args):
    """Events of a block of retained users: (caller, tower, callee, minute, realized MD)."""
    (seed, users, n_calls, target_md, home, neighbours, spread, ptr, contacts, counts, ext_pool, ext_base,
     days, tolerance, user_ids) = args
    out_caller, out_tower, out_callee, out_minute, out_md = [], [], [], [], []
    for j, i in enumerate(users):
        rng = substream(seed, "user", int(i))
        m = int(n_calls[j])
        plan = plan_trips(float(target_md[j]), m, 1 + neighbours.shape[1], tolerance, user=user_ids[j])
        walk = trip_walk(plan)
        towers = np.empty(plan.n_towers, dtype=np.int64)
        towers[0] = home[j]
        # personal towers: a random subset of the home tower's nearest neighbours,
        # drawn from a pool whose size sets how far the user ranges
        pool = min(neighbours.shape[1], max(plan.n_towers - 1, math.ceil(spread[j] * (plan.n_towers - 1))))
        towers[1:] = neighbours[j, rng.permutation(pool)[: plan.n_towers - 1]]
        call_stop, minute = schedule_calls(walk, m, days, rng)
        social = np.repeat(contacts[ptr[j]:ptr[j + 1]], counts[ptr[j]:ptr[j + 1]])
        if len(social) >= m:
            raise InfeasibleTargetError(f"user {user_ids[j]}: {len(social)} social calls leave none external")
        ext = ext_base + rng.integers(0, ext_pool, size=m - len(social))
        out_caller.append(np.full(m, i, dtype=np.int64))
        out_tower.append(towers[walk[call_stop]])
        out_callee.append(rng.permutation(np.concatenate([social, ext])))
        out_minute.append(minute)
        out_md.append(plan.md)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, np.int64)
    return cat(out_caller), cat(out_tower), cat(out_callee), cat(out_minute), np.array(out_md)


@dataclass
class Corpus:
    """Paths of a generated corpus."""

    directory: Path
    cdr: Path
    towers: Path
    regions: Path
    tower_regions: Path
    geometry: Path
    ground_truth: Path
    records: int


def generate_corpus(cfg: GeneratorConfig, out_dir: str | Path, workers: int = 1, block_size: int = 4096) -> Corpus:
    """Write a CDR file, towers, regions (CSV + GeoJSON), a tower mapping and ground truth."""
    out = Path(out_dir)
    window = cfg.window
    min_calls = min_calls_retained(window, cfg.min_rate)
    layout = build_layout(cfg)
    n_towers = len(layout.tower_ids)

    # users: retained population plus a few that the activity filter must drop
    rng = substream(cfg.seed, "users")
    n_low = int(round(cfg.low_activity_fraction * cfg.users))
    n_all = cfg.users + n_low
    user_ids = _ids("U", n_all, 7)
    low = np.zeros(n_all, dtype=bool)
    low[rng.choice(n_all, size=n_low, replace=False)] = True
    kept = np.flatnonzero(~low)
    region = np.empty(n_all, dtype=np.int64)
    first = rng.permutation(cfg.users)[: cfg.regions]
    region[kept] = rng.integers(0, cfg.regions, size=cfg.users)
    region[kept[first]] = np.arange(cfg.regions)
    region[low] = rng.integers(0, cfg.regions, size=n_low)
    home = region * cfg.towers_per_region + rng.integers(0, cfg.towers_per_region, size=n_all)
    rate = rng.uniform(*cfg.call_rate, size=n_all)
    n_calls = np.maximum(rng.poisson(rate * cfg.days), min_calls)
    n_calls[low] = rng.integers(1, min_calls, size=n_low)

    # mobility targets from a regional level plus user jitter
    level = rng.uniform(*cfg.md_level, size=cfg.regions)
    target_md = np.clip(level[region] + rng.normal(0, cfg.md_jitter, n_all), *cfg.md_range)

    spread = rng.uniform(*cfg.tower_spread, size=cfg.regions)
    social = plan_social(n_calls[kept], cfg.max_contacts, cfg.social_share, cfg.tolerance,
                         substream(cfg.seed, "social"))

    # personal towers: nearest neighbours of each home tower
    lat0 = math.radians(cfg.origin[0])
    pts = np.column_stack([layout.tower_lon * math.cos(lat0), layout.tower_lat])
    t_max = towers_for_trips(int(0.7 * n_calls.max()))
    n_nb = min(n_towers - 1, math.ceil(cfg.tower_spread[1] * (t_max - 1)))
    if n_nb > 0:
        _, nb = cKDTree(pts).query(pts, k=n_nb + 1)
        nb = np.asarray(nb).reshape(n_towers, -1)[:, 1:]
    else:
        nb = np.zeros((n_towers, 0), dtype=np.int64)

    ext_pool = max(cfg.users // 10, 1)
    ext_base = n_all
    kept_contacts = kept[social.contacts]  # contact positions -> global user index
    payloads = []
    for lo, hi in blocks(len(kept), block_size):
        idx = kept[lo:hi]
        ptr = social.ptr[lo: hi + 1]
        payloads.append((
            cfg.seed, idx, n_calls[idx], target_md[idx], home[idx], nb[home[idx]], spread[region[idx]],
            ptr - ptr[0], kept_contacts[ptr[0]: ptr[-1]], social.counts[ptr[0]: ptr[-1]],
            ext_pool, ext_base, cfg.days, cfg.tolerance, user_ids[idx],
        ))
    parts = ordered_map(_user_block, payloads, workers, processes=workers > 1)
    realized_md = np.concatenate([p[4] for p in parts]) if parts else np.zeros(0)

    lrng = substream(cfg.seed, "low")
    low_idx = np.flatnonzero(low)
    low_parts = []
    for i in low_idx:
        m = int(n_calls[i])
        towers = np.append(home[i], nb[home[i], : max(0, min(2, nb.shape[1]))])
        low_parts.append((
            np.full(m, i, dtype=np.int64),
            towers[lrng.integers(0, len(towers), size=m)],
            ext_base + lrng.integers(0, ext_pool, size=m),
            np.sort(lrng.integers(0, cfg.days * 1440, size=m)),
        ))

    caller = np.concatenate([p[0] for p in parts] + [p[0] for p in low_parts])
    tower = np.concatenate([p[1] for p in parts] + [p[1] for p in low_parts])
    callee = np.concatenate([p[2] for p in parts] + [p[2] for p in low_parts])
    minute = np.concatenate([p[3] for p in parts] + [p[3] for p in low_parts])
    order = np.argsort(minute, kind="stable")
    caller, tower, callee, minute = caller[order], tower[order], callee[order], minute[order]

    # planted regional indicators on the realized regional mean MD
    counts = np.bincount(region[kept], minlength=cfg.regions)
    mean_md = np.bincount(region[kept], weights=realized_md, minlength=cfg.regions) / counts
    prng = substream(cfg.seed, "plant")
    di_noise = prng.normal(0, cfg.di_noise, cfg.regions) if cfg.di_noise > 0 else np.zeros(cfg.regions)
    pci_noise = prng.normal(0, cfg.pci_noise, cfg.regions) if cfg.pci_noise > 0 else np.zeros(cfg.regions)
    di_raw = cfg.di_intercept + cfg.di_slope * mean_md + di_noise
    di = np.clip(di_raw, 0.0, DI_MAX)
    pci = cfg.pci_intercept + cfg.pci_slope * mean_md + pci_noise
    inputs = np.array([deprivation_inputs_for(float(v), prng) for v in di]) if cfg.regions else np.zeros((0, 10))

    # files
    out.mkdir(parents=True, exist_ok=True)
    start = window.start_minute
    uniq, inv = np.unique(minute, return_inverse=True)
    stamps = pa.array(format_minutes(uniq + start).tolist(), type=pa.string())
    ext_ids = _ids("X", ext_pool, 6)
    people = pa.array(np.concatenate([user_ids, ext_ids]).tolist(), type=pa.string())
    table = pa.table({
        "timestamp": pa.DictionaryArray.from_arrays(pa.array(inv.astype(np.int32)), stamps),
        "tower": pa.DictionaryArray.from_arrays(pa.array(tower.astype(np.int32)),
                                                pa.array(layout.tower_ids.tolist(), type=pa.string())),
        "caller": pa.DictionaryArray.from_arrays(pa.array(caller.astype(np.int32)), people),
        "callee": pa.DictionaryArray.from_arrays(pa.array(callee.astype(np.int32)), people),
    })
    cdr_path = out / "cdr.csv"
    n_records = write_csv_table(cdr_path, CDR_COLUMNS, table)
    write_csv(out / "towers.csv", TOWER_COLUMNS, [layout.tower_ids, fmt_array(layout.tower_lat), fmt_array(layout.tower_lon)])
    write_csv(out / "regions.csv", REGION_COLUMNS, [
        layout.region_ids,
        [f"region-{i}" for i in range(cfg.regions)],
        layout.population,
        fmt_array(layout.area_km2),
        fmt_array(di),
        fmt_array(pci),
    ])
    write_csv(out / "tower_regions.csv", MAPPING_COLUMNS, [layout.tower_ids, layout.region_ids[layout.tower_region]])
    _write_geometry(out / "regions.geojson", layout, cfg.cell_deg)

    truth = {
        "config": cfg.as_dict(),
        "window": {"start": window.start.isoformat(), "end": window.end.isoformat(), "min_calls": min_calls},
        "plant": {
            "di_intercept": cfg.di_intercept, "di_slope": cfg.di_slope, "di_noise_sd": cfg.di_noise,
            "pci_intercept": cfg.pci_intercept, "pci_slope": cfg.pci_slope, "pci_noise_sd": cfg.pci_noise,
            "regressor": "mean_MD", "di_clipped": int(np.sum(di != di_raw)),
        },
        "deprivation_coefficients": dict(zip(DEPRIVATION_FIELDS, DEPRIVATION_COEFFICIENTS)),
        "users": {
            "user_id": user_ids[kept],
            "region_id": layout.region_ids[region[kept]],
            "home_tower": layout.tower_ids[home[kept]],
            "calls": n_calls[kept],
            "target_SV": social.degree,
            "target_SD": social.target_sd,
            "realized_SD": social.realized_sd,
            "target_MD": target_md[kept],
            "realized_MD": realized_md,
        },
        "low_activity_users": user_ids[low],
        "regions": {
            "region_id": layout.region_ids,
            "user_count": counts,
            "mean_MD": mean_md,
            "DI": di,
            "PCI": pci,
            "DI_noise": di_noise,
            "PCI_noise": pci_noise,
            "deprivation_inputs": {f: inputs[:, j] for j, f in enumerate(DEPRIVATION_FIELDS)},
        },
    }
    with atomic_write(out / "ground_truth.json") as fh:
        fh.write(dumps_json(truth).encode("utf-8"))
    return Corpus(out, cdr_path, out / "towers.csv", out / "regions.csv", out / "tower_regions.csv",
                  out / "regions.geojson", out / "ground_truth.json", n_records)


def _write_geometry(path: Path, layout: Layout, cell: float) -> None:
    feats = []
    for rid, la, lo in zip(layout.region_ids, layout.cell_lat, layout.cell_lon):
        ring = [[lo, la], [lo + cell, la], [lo + cell, la + cell], [lo, la + cell], [lo, la]]
        ring = [[float(f"{x:.9g}"), float(f"{y:.9g}")] for x, y in ring]
        feats.append({"type": "Feature", "properties": {"region_id": rid},
                      "geometry": {"type": "Polygon", "coordinates": [ring]}})
    with atomic_write(path) as fh:
        fh.write(json.dumps({"type": "FeatureCollection", "features": feats}).encode("utf-8"))


def generate_nulls_benchmark(cfg: GeneratorConfig, out_dir: str | Path, workers: int = 1) -> Corpus:
    """A corpus whose indicators do not depend on any measure."""
    return generate_corpus(dataclasses.replace(cfg, di_slope=0.0, pci_slope=0.0), out_dir, workers)


def load_ground_truth(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
