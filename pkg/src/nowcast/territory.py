"""Regions, tower-to-region mapping, and regional aggregation of measures."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError
from .ingest import TowerTable
from .measures import ProfileTable, haversine_km

log = logging.getLogger(__name__)

REGION_COLUMNS = ("region_id", "name", "population", "area_km2", "deprivation_index", "per_capita_income")
INDICATORS = ("deprivation_index", "per_capita_income")
MAPPING_COLUMNS = ("tower", "region_id")
AGGREGATE_COLUMNS = ("region_id", "user_count", "mean_SV", "mean_SD", "mean_MV", "mean_MD")
MEASURES = ("SV", "SD", "MV", "MD")


@dataclass(frozen=True)
class Region:
    region_id: str
    name: str
    population: float
    area: float
    deprivation_index: float = math.nan
    per_capita_income: float = math.nan

    def __post_init__(self):
        if not self.population > 0:
            raise ValueError(f"region {self.region_id}: population must be positive")
        if not self.area > 0:
            raise ValueError(f"region {self.region_id}: area must be positive")

    @property
    def population_density(self) -> float:
        return self.population / self.area


class RegionTable:
    """Regions ordered by id."""

    def __init__(self, regions, excluded: int = 0):
        self.regions = sorted(regions, key=lambda r: r.region_id)
        self.by_id = {r.region_id: r for r in self.regions}
        if len(self.by_id) != len(self.regions):
            raise DataError("duplicate region_id in region table")
        self.excluded = excluded

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self) -> Iterator[Region]:
        return iter(self.regions)

    def __getitem__(self, region_id: str) -> Region:
        return self.by_id[region_id]

    def __contains__(self, region_id: object) -> bool:
        return region_id in self.by_id

    @property
    def ids(self) -> np.ndarray:
        return np.array([r.region_id for r in self.regions], dtype=object)

    def column(self, name: str) -> np.ndarray:
        if name in ("PD", "population_density"):
            return np.array([r.population_density for r in self.regions])
        if name == "DI":
            name = "deprivation_index"
        elif name == "PCI":
            name = "per_capita_income"
        return np.array([getattr(r, name) for r in self.regions], dtype=float)


def _number(text: str) -> float:
    text = text.strip()
    return float(text) if text else math.nan


def load_regions(path: str | Path, population_floor: float = 1000) -> RegionTable:
    """Read the region CSV, keeping regions with population above the floor.

    The two indicator columns may be missing entirely or left blank; such
    indicators are stored as NaN.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read region file {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise DataError(f"{path}: empty region file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:4]) != REGION_COLUMNS[:4] or any(h not in INDICATORS for h in header[4:]):
        raise DataError(f"{path}: expected header {','.join(REGION_COLUMNS)!r}, got {','.join(header)!r}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: no regions")
    kept, excluded, seen = [], 0, set()
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, (c.strip() for c in row)))
        rid = rec["region_id"]
        if rid in seen:
            raise DataError(f"{path}:{lineno}: duplicate region_id {rid!r}")
        seen.add(rid)
        try:
            region = Region(
                region_id=rid,
                name=rec["name"],
                population=float(rec["population"]),
                area=float(rec["area_km2"]),
                **{k: _number(rec[k]) for k in INDICATORS if k in rec},
            )
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if region.population <= population_floor:
            excluded += 1
            continue
        kept.append(region)
    return RegionTable(kept, excluded=excluded)


def load_tower_mapping(path: str | Path) -> dict[str, str]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MAPPING_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(MAPPING_COLUMNS)!r}")
        mapping = {}
        for row in reader:
            if row:
                tower, region = (c.strip() for c in row)
                mapping[tower] = region
    return mapping


@dataclass
class RegionShape:
    """A region's outline: every ring of every polygon, as (lon, lat) arrays."""

    region_id: str
    rings: list[np.ndarray]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        pts = np.vstack(self.rings)
        return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()

    def centroid(self) -> tuple[float, float]:
        """Area-weighted centroid (lat, lon) of the outer rings, in degrees."""
        area = cx = cy = 0.0
        for ring in self.rings:
            x, y = ring[:, 0], ring[:, 1]
            x1, y1 = np.roll(x, -1), np.roll(y, -1)
            cross = x * y1 - x1 * y
            a = cross.sum() / 2
            if a == 0:
                continue
            area += a
            cx += ((x + x1) * cross).sum() / 6
            cy += ((y + y1) * cross).sum() / 6
        if area == 0:
            pts = np.vstack(self.rings)
            return float(pts[:, 1].mean()), float(pts[:, 0].mean())
        return cy / area, cx / area


def load_geometry(path: str | Path) -> list[RegionShape]:
    """Read a GeoJSON FeatureCollection of (Multi)Polygons keyed by ``region_id``."""
    path = Path(path)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read geometry {path}: {exc}") from exc
    shapes = []
    for feat in doc.get("features", []):
        rid = str(feat.get("properties", {}).get("region_id"))
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            polys = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise DataError(f"{path}: region {rid} has unsupported geometry {geom.get('type')!r}")
        rings = []
        for poly in polys:
            for ring in poly:
                arr = np.asarray(ring, dtype=float)[:, :2]
                if len(arr) > 1 and np.array_equal(arr[0], arr[-1]):
                    arr = arr[:-1]
                rings.append(arr)
        shapes.append(RegionShape(rid, rings))
    return shapes


def locate_points(lon: np.ndarray, lat: np.ndarray, rings: list[np.ndarray], eps: float = 1e-12):
    """Even-odd containment of points in a set of rings.

    Returns ``(inside, on_edge)`` boolean arrays. Points on an edge count
    as inside.
    """
    lon = np.asarray(lon, dtype=float)[:, None]
    lat = np.asarray(lat, dtype=float)[:, None]
    crossings = np.zeros(lon.shape[0], dtype=np.int64)
    on_edge = np.zeros(lon.shape[0], dtype=bool)
    for ring in rings:
        x1, y1 = ring[:, 0][None, :], ring[:, 1][None, :]
        x2, y2 = np.roll(ring[:, 0], -1)[None, :], np.roll(ring[:, 1], -1)[None, :]
        straddles = (y1 > lat) != (y2 > lat)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
        crossings += (straddles & (lon < x_cross)).sum(axis=1)
        cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
        scale = np.maximum(np.hypot(x2 - x1, y2 - y1), 1.0)
        within = (
            (lon >= np.minimum(x1, x2) - eps) & (lon <= np.maximum(x1, x2) + eps)
            & (lat >= np.minimum(y1, y2) - eps) & (lat <= np.maximum(y1, y2) + eps)
        )
        on_edge |= ((np.abs(cross) <= eps * scale) & within).any(axis=1)
    return (crossings % 2 == 1) | on_edge, on_edge


@dataclass
class TowerAssignment:
    regions: dict[str, str]
    unassigned: list[str]
    by_containment: int = 0
    by_nearest: int = 0
    explicit: int = 0


def map_tower_to_region(
    towers: TowerTable,
    regions: RegionTable | None = None,
    mapping: dict[str, str] | None = None,
    geometry: list[RegionShape] | None = None,
    cutoff_km: float = 10.0,
) -> TowerAssignment:
    """Assign every tower to a region.

    An explicit mapping row wins. Otherwise the polygon containing the
    tower (lexicographically smallest region_id when several contain it or
    it lies on a shared edge); otherwise the region whose centroid is
    nearest, if within ``cutoff_km``; otherwise unassigned.
    """
    if mapping is None and geometry is None:
        raise ValueError("need an explicit tower mapping, a region geometry, or both")
    mapping = mapping or {}
    out: dict[str, str] = {}
    result = TowerAssignment(out, [])
    pending = []
    for t in towers.ids:
        if t in mapping:
            out[t] = mapping[t]
            result.explicit += 1
        else:
            pending.append(t)

    if geometry and pending:
        codes = np.array([towers.code(t) for t in pending])
        lat, lon = towers.lat[codes], towers.lon[codes]
        best = np.full(len(pending), None, dtype=object)
        for shape in sorted(geometry, key=lambda s: s.region_id, reverse=True):
            x0, y0, x1, y1 = shape.bbox
            cand = np.flatnonzero((lon >= x0) & (lon <= x1) & (lat >= y0) & (lat <= y1))
            if len(cand) == 0:
                continue
            inside, _ = locate_points(lon[cand], lat[cand], shape.rings)
            # reverse id order: the smallest containing id is written last
            best[cand[inside]] = shape.region_id
        found = best != None  # noqa: E711
        for t, rid in zip(np.asarray(pending, dtype=object)[found], best[found]):
            out[t] = rid
        result.by_containment = int(found.sum())

        rest = np.flatnonzero(~found)
        if len(rest):
            ordered = sorted(geometry, key=lambda s: s.region_id)
            cents = np.array([s.centroid() for s in ordered])
            ids = [s.region_id for s in ordered]
            for i in rest:
                d = haversine_km(lat[i], lon[i], cents[:, 0], cents[:, 1])
                j = int(np.argmin(d))
                if d[j] <= cutoff_km:
                    out[pending[i]] = ids[j]
                    result.by_nearest += 1
                else:
                    result.unassigned.append(pending[i])
    else:
        result.unassigned.extend(pending)

    if towers.ids.size and len(result.unassigned) > 0.1 * len(towers.ids):
        log.warning("%d of %d towers could not be assigned to a region", len(result.unassigned), len(towers.ids))
    if regions is not None:
        unknown = {r for r in out.values() if r not in regions}
        if unknown:
            log.info("%d towers map to regions absent from the region table", sum(r in unknown for r in out.values()))
    return result


@dataclass
class UserAssignment:
    user_ids: np.ndarray
    region_ids: np.ndarray  # None where the home tower has no region
    dropped: int

    @property
    def assigned(self) -> np.ndarray:
        return self.region_ids != None  # noqa: E711

    def as_dict(self) -> dict[str, str]:
        mask = self.assigned
        return dict(zip(self.user_ids[mask], self.region_ids[mask]))


def assign_users(profiles: ProfileTable, tower_region: dict[str, str]) -> UserAssignment:
    """Place each user in the region of their home tower."""
    regions = np.array([tower_region.get(t) for t in profiles.home_tower], dtype=object)
    dropped = int(np.sum(regions == None))  # noqa: E711
    return UserAssignment(profiles.user_ids, regions, dropped)


@dataclass(frozen=True)
class RegionAggregate:
    region_id: str
    mean_sv: float
    mean_sd: float
    mean_mv: float
    mean_md: float
    user_count: int


@dataclass
class AggregateTable:
    """Per-region means; ``means`` has columns SV, SD, MV, MD. Sorted by region id."""

    region_ids: np.ndarray
    user_count: np.ndarray
    means: np.ndarray
    excluded: int = 0

    def __len__(self) -> int:
        return len(self.region_ids)

    def __iter__(self) -> Iterator[RegionAggregate]:
        for rid, n, m in zip(self.region_ids, self.user_count, self.means):
            yield RegionAggregate(rid, float(m[0]), float(m[1]), float(m[2]), float(m[3]), int(n))

    def __getitem__(self, region_id: str) -> RegionAggregate:
        i = int(np.searchsorted(self.region_ids.astype(str), region_id))
        if i >= len(self) or self.region_ids[i] != region_id:
            raise KeyError(region_id)
        m = self.means[i]
        return RegionAggregate(region_id, float(m[0]), float(m[1]), float(m[2]), float(m[3]), int(self.user_count[i]))

    def column(self, measure: str) -> np.ndarray:
        return self.means[:, MEASURES.index(measure)]


def region_means(values: np.ndarray, region_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(sorted region ids, counts, per-region column means); sums follow row order."""
    uniq, inverse = np.unique(region_ids.astype(str), return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq))
    sums = np.column_stack(
        [np.bincount(inverse, weights=values[:, j], minlength=len(uniq)) for j in range(values.shape[1])]
    ) if len(uniq) else np.zeros((0, values.shape[1]))
    return uniq.astype(object), counts, sums / np.maximum(counts, 1)[:, None]


def aggregate(profiles: ProfileTable, assignment: UserAssignment, min_users: int = 1) -> AggregateTable:
    """Arithmetic mean of each measure over the users assigned to a region.

    Regions with fewer than ``min_users`` users are left out and counted.
    """
    if not np.array_equal(profiles.user_ids, assignment.user_ids):
        raise ValueError("assignment does not match the profile table")
    # sum in sorted user order so the result does not depend on row order
    order = np.argsort(profiles.user_ids.astype(str), kind="stable")
    order = order[assignment.assigned[order]]
    ids, counts, means = region_means(profiles.values()[order], assignment.region_ids[order])
    keep = counts >= max(min_users, 1)
    return AggregateTable(ids[keep], counts[keep], means[keep], excluded=int((~keep).sum()))
