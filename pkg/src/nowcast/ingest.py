"""CDR ingestion: parsing, activity filter, trajectories and the call graph.

Records are held column-wise (numpy arrays of integer codes) so that a
national-scale file fits in memory; :class:`CdrRecord` and
:class:`Trajectory` give per-row / per-user views for small inputs and tests.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from .errors import DataError

log = logging.getLogger(__name__)

CDR_COLUMNS = ("timestamp", "tower", "caller", "callee")
TOWER_COLUMNS = ("tower", "latitude", "longitude")
TIMESTAMP_FORMAT = "%Y/%m/%d %H:%M"
ISO_FORMATS = ("%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S")
MAX_MALFORMED_FRACTION = 0.01
MINUTES_PER_DAY = 1440

_EPOCH = dt.datetime(1970, 1, 1)


def to_minute(ts: dt.datetime) -> int:
    """Minutes since 1970-01-01 00:00, local wall-clock (no timezone math)."""
    return int((ts.replace(second=0, microsecond=0, tzinfo=None) - _EPOCH) // dt.timedelta(minutes=1))


def from_minute(minute: int) -> dt.datetime:
    return _EPOCH + dt.timedelta(minutes=int(minute))


def format_minutes(minutes: np.ndarray) -> np.ndarray:
    """Render minute stamps as ``YYYY/MM/DD HH:MM`` strings."""
    minutes = np.asarray(minutes, dtype=np.int64)
    uniq, inverse = np.unique(minutes, return_inverse=True)
    text = np.datetime_as_string(uniq.astype("datetime64[m]"), unit="m")
    text = np.char.replace(np.char.replace(text, "-", "/"), "T", " ")
    return text.astype(object)[inverse]


def parse_timestamp(text: str) -> dt.datetime:
    for f in (TIMESTAMP_FORMAT,) + ISO_FORMATS:
        try:
            return dt.datetime.strptime(text, f)
        except ValueError:
            continue
    raise ValueError(f"unrecognised timestamp {text!r}")


@dataclass(frozen=True)
class CdrRecord:
    timestamp: dt.datetime
    tower_id: str
    caller_id: str
    callee_id: str

    def __post_init__(self):
        if self.caller_id == self.callee_id:
            raise ValueError(f"caller and callee are both {self.caller_id!r}")


@dataclass(frozen=True)
class Tower:
    tower_id: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"tower {self.tower_id}: latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"tower {self.tower_id}: longitude {self.longitude} out of range")


@dataclass(frozen=True)
class ObservationWindow:
    """Half-open calendar window ``[start 00:00, end 00:00)``."""

    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.length_days < 1:
            raise ValueError(f"observation window {self.start}..{self.end} is empty")

    @classmethod
    def of_length(cls, start: dt.date, length_days: int) -> "ObservationWindow":
        return cls(start, start + dt.timedelta(days=length_days))

    @classmethod
    def infer(cls, minutes: np.ndarray) -> "ObservationWindow":
        """Smallest whole-day window covering ``minutes``."""
        if len(minutes) == 0:
            raise ValueError("cannot infer an observation window from an empty file")
        first = from_minute(int(np.min(minutes))).date()
        last = from_minute(int(np.max(minutes))).date()
        return cls(first, last + dt.timedelta(days=1))

    @property
    def length_days(self) -> int:
        return (self.end - self.start).days

    @property
    def start_minute(self) -> int:
        return to_minute(dt.datetime.combine(self.start, dt.time()))

    @property
    def end_minute(self) -> int:
        return to_minute(dt.datetime.combine(self.end, dt.time()))

    def contains(self, minutes: np.ndarray) -> np.ndarray:
        minutes = np.asarray(minutes)
        return (minutes >= self.start_minute) & (minutes < self.end_minute)


class TowerTable:
    """Tower coordinates indexed by id; ids are kept in lexicographic order.

    With ``planar=True`` the coordinates are read as kilometres on a flat
    plane (``longitude`` is x, ``latitude`` is y). Only used for testing.
    """

    def __init__(self, ids: Iterable[str], lat: Iterable[float], lon: Iterable[float], planar: bool = False):
        ids = np.asarray(list(ids), dtype=object)
        lat = np.asarray(list(lat), dtype=float)
        lon = np.asarray(list(lon), dtype=float)
        if not (len(ids) == len(lat) == len(lon)):
            raise ValueError("tower columns differ in length")
        order = np.argsort(ids.astype(str), kind="stable")
        self.ids = ids[order]
        self.lat = lat[order]
        self.lon = lon[order]
        self.planar = planar
        self.index = {t: i for i, t in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            seen, dups = set(), set()
            for t in self.ids:
                (dups if t in seen else seen).add(t)
            raise ValueError(f"duplicate tower ids: {sorted(dups)[:5]}")
        if not planar:
            bad = (np.abs(self.lat) > 90) | (np.abs(self.lon) > 180) | ~np.isfinite(self.lat) | ~np.isfinite(self.lon)
            if bad.any():
                raise ValueError(f"tower {self.ids[np.argmax(bad)]} has out-of-range coordinates")

    @classmethod
    def from_towers(cls, towers: Iterable[Tower]) -> "TowerTable":
        towers = list(towers)
        return cls([t.tower_id for t in towers], [t.latitude for t in towers], [t.longitude for t in towers])

    @classmethod
    def planar_km(cls, coords: dict[str, tuple[float, float]]) -> "TowerTable":
        """Build a planar table from ``{tower_id: (x_km, y_km)}``."""
        ids = list(coords)
        return cls(ids, [coords[t][1] for t in ids], [coords[t][0] for t in ids], planar=True)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, tower_id: object) -> bool:
        return tower_id in self.index

    def code(self, tower_id: str) -> int:
        return self.index[tower_id]

    def coords(self, tower_id: str) -> tuple[float, float]:
        i = self.index[tower_id]
        return float(self.lat[i]), float(self.lon[i])


def parse_towers(path: str | Path) -> TowerTable:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read tower file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TOWER_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(TOWER_COLUMNS)!r}, got {header!r}")
        ids, lat, lon = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                tower_id, la, lo = (c.strip() for c in row)
                ids.append(tower_id)
                lat.append(float(la))
                lon.append(float(lo))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad tower row {row!r}") from exc
    try:
        return TowerTable(ids, lat, lon)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


@dataclass
class CallRecords:
    """Column-wise call records.

    ``caller``/``callee`` index into ``user_ids`` (sorted), ``tower`` indexes
    into ``tower_ids`` (the tower table's ids). Row order is file order.
    """

    minute: np.ndarray
    tower: np.ndarray
    caller: np.ndarray
    callee: np.ndarray
    user_ids: np.ndarray
    tower_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.minute)

    def __iter__(self) -> Iterator[CdrRecord]:
        for m, t, a, b in zip(self.minute, self.tower, self.caller, self.callee):
            yield CdrRecord(from_minute(m), self.tower_ids[t], self.user_ids[a], self.user_ids[b])

    @classmethod
    def from_records(cls, records: Iterable[CdrRecord], towers: TowerTable) -> "CallRecords":
        records = list(records)
        users = np.array(sorted({r.caller_id for r in records} | {r.callee_id for r in records}), dtype=object)
        uindex = {u: i for i, u in enumerate(users)}
        return cls(
            minute=np.array([to_minute(r.timestamp) for r in records], dtype=np.int64),
            tower=np.array([towers.code(r.tower_id) for r in records], dtype=np.int32),
            caller=np.array([uindex[r.caller_id] for r in records], dtype=np.int32),
            callee=np.array([uindex[r.callee_id] for r in records], dtype=np.int32),
            user_ids=users,
            tower_ids=towers.ids,
        )


@dataclass
class ParseStats:
    rows: int = 0
    malformed: int = 0
    dropped_unknown_tower: int = 0
    dropped_out_of_window: int = 0
    kept: int = 0


class ParsedCdr(NamedTuple):
    records: CallRecords
    towers: TowerTable
    stats: ParseStats
    window: ObservationWindow


def _encode_sorted(values: pa.Array | pa.ChunkedArray) -> tuple[np.ndarray, np.ndarray]:
    """Dictionary-encode strings; codes follow lexicographic order of the values."""
    enc = pc.dictionary_encode(values)
    if isinstance(enc, pa.ChunkedArray):
        enc = enc.combine_chunks() if enc.num_chunks else pa.DictionaryArray.from_arrays(
            pa.array([], pa.int32()), pa.array([], pa.string()))
    dictionary = np.asarray(enc.dictionary.to_pylist(), dtype=object)
    codes = enc.indices.to_numpy(zero_copy_only=False).astype(np.int64)
    order = np.argsort(dictionary.astype(str), kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return dictionary[order], rank[codes] if len(codes) else codes


def _parse_minutes(col: pa.ChunkedArray) -> np.ndarray:
    """Parse timestamps to epoch minutes; unparseable entries become -1."""
    ts = pc.strptime(col, format=TIMESTAMP_FORMAT, unit="s", error_is_null=True)
    for f in ISO_FORMATS:
        if ts.null_count == 0:
            break
        alt = pc.strptime(col, format=f, unit="s", error_is_null=True)
        ts = pc.coalesce(ts, alt)
    secs = pc.fill_null(ts.cast(pa.int64()), -60).to_numpy()
    return np.floor_divide(secs, 60)


def parse_cdr(
    path: str | Path,
    towers_path: str | Path | TowerTable,
    window: ObservationWindow | None = None,
    use_threads: bool = True,
) -> ParsedCdr:
    """Parse a CDR CSV against a tower table.

    Rows with a wrong field count, empty fields, an unparseable timestamp or
    ``caller == callee`` are malformed: skipped and tallied, and fatal above
    1% of data rows. Rows naming a tower absent from the tower table, or
    falling outside ``window``, are dropped and tallied separately. When
    ``window`` is None it is inferred from the well-formed rows.
    """
    path = Path(path)
    towers = towers_path if isinstance(towers_path, TowerTable) else parse_towers(towers_path)
    try:
        with open(path, "rb") as fh:
            header = fh.readline().decode("utf-8").strip()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read CDR file {path}: {exc}") from exc
    columns = [c.strip() for c in header.split(",")]
    if tuple(columns[:4]) != CDR_COLUMNS or columns[4:] not in ([], ["duration"]):
        raise DataError(f"{path}: expected header {','.join(CDR_COLUMNS)!r}, got {header!r}")

    bad_width = 0

    def on_invalid(row):
        nonlocal bad_width
        bad_width += 1
        return "skip"

    try:
        table = pacsv.read_csv(
            path,
            read_options=pacsv.ReadOptions(use_threads=use_threads),
            parse_options=pacsv.ParseOptions(invalid_row_handler=on_invalid),
            convert_options=pacsv.ConvertOptions(
                column_types={c: pa.string() for c in columns},
                include_columns=list(CDR_COLUMNS),
                strings_can_be_null=False,
            ),
        )
    except (pa.ArrowInvalid, OSError) as exc:
        raise DataError(f"cannot parse CDR file {path}: {exc}") from exc

    stats = ParseStats(rows=table.num_rows + bad_width)
    minute = _parse_minutes(table["timestamp"])
    caller_col = pc.utf8_trim_whitespace(table["caller"])
    callee_col = pc.utf8_trim_whitespace(table["callee"])
    tower_col = pc.utf8_trim_whitespace(table["tower"])
    ok = minute >= 0
    for col in (caller_col, callee_col, tower_col):
        ok &= pc.not_equal(pc.utf8_length(col), 0).to_numpy(zero_copy_only=False)
    ok &= ~pc.equal(caller_col, callee_col).to_numpy(zero_copy_only=False)
    stats.malformed = bad_width + int((~ok).sum())
    if stats.rows and stats.malformed / stats.rows > MAX_MALFORMED_FRACTION:
        raise DataError(
            f"{path}: {stats.malformed} of {stats.rows} rows malformed "
            f"(limit {MAX_MALFORMED_FRACTION:.0%})"
        )
    if stats.malformed:
        log.warning("%s: skipped %d malformed rows", path, stats.malformed)

    tower_codes = pc.index_in(tower_col, value_set=pa.array(list(towers.ids), pa.string()))
    tower_codes = pc.fill_null(tower_codes, -1).to_numpy(zero_copy_only=False).astype(np.int64)
    known = tower_codes >= 0
    stats.dropped_unknown_tower = int((ok & ~known).sum())
    keep = ok & known
    if window is None:
        window = ObservationWindow.infer(minute[keep]) if keep.any() else None
    if window is not None:
        inside = window.contains(minute)
        stats.dropped_out_of_window = int((keep & ~inside).sum())
        keep &= inside
    stats.kept = int(keep.sum())
    if window is None:
        # empty input and no configured window: any one-day window will do
        window = ObservationWindow.of_length(dt.date(1970, 1, 1), 1)

    idx = np.flatnonzero(keep)
    sel = pa.array(idx)
    both = pa.chunked_array(
        pc.take(caller_col, sel).chunks + pc.take(callee_col, sel).chunks, type=pa.string()
    )
    user_ids, codes = _encode_sorted(both)
    n = len(idx)
    records = CallRecords(
        minute=minute[idx].astype(np.int64),
        tower=tower_codes[idx].astype(np.int32),
        caller=codes[:n].astype(np.int32),
        callee=codes[n:].astype(np.int32),
        user_ids=user_ids,
        tower_ids=towers.ids,
    )
    return ParsedCdr(records, towers, stats, window)


def outgoing_counts(records: CallRecords) -> np.ndarray:
    return np.bincount(records.caller, minlength=len(records.user_ids))


def retained_mask(records: CallRecords, window: ObservationWindow, min_rate: float = 0.5) -> np.ndarray:
    """Boolean mask over ``records.user_ids``: outgoing calls per day > ``min_rate``."""
    if not min_rate > 0:
        raise ValueError(f"min_rate must be positive, got {min_rate}")
    return outgoing_counts(records) / window.length_days > min_rate


def filter_users(records: CallRecords, window: ObservationWindow, min_rate: float = 0.5) -> frozenset[str]:
    """Ids of users making more than ``min_rate`` calls per day on average."""
    mask = retained_mask(records, window, min_rate)
    return frozenset(records.user_ids[mask].tolist())


def _as_mask(records: CallRecords, retained) -> np.ndarray:
    if isinstance(retained, np.ndarray) and retained.dtype == bool:
        return retained
    retained = set(retained)
    return np.fromiter((u in retained for u in records.user_ids), dtype=bool, count=len(records.user_ids))


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    minutes: np.ndarray
    towers: np.ndarray

    def __len__(self) -> int:
        return len(self.minutes)

    @property
    def events(self) -> list[tuple[dt.datetime, str]]:
        return [(from_minute(m), t) for m, t in zip(self.minutes, self.towers)]

    @classmethod
    def from_events(cls, user_id: str, events: Iterable[tuple[dt.datetime, str]]) -> "Trajectory":
        """Build from (timestamp, tower_id) pairs; sorted stably by time."""
        events = list(events)
        minutes = np.array([to_minute(ts) for ts, _ in events], dtype=np.int64)
        towers = np.array([t for _, t in events], dtype=object)
        order = np.argsort(minutes, kind="stable")
        return cls(user_id, minutes[order], towers[order])


@dataclass
class Trajectories:
    """Every retained user's time-ordered calls, stored CSR-style.

    Events of ``user_ids[i]`` occupy ``[offsets[i], offsets[i+1])`` of
    ``minute``/``tower``; ``tower`` indexes into ``tower_ids``.
    """

    user_ids: np.ndarray
    offsets: np.ndarray
    minute: np.ndarray
    tower: np.ndarray
    tower_ids: np.ndarray
    _index: dict = field(default=None, init=False, repr=False)

    def __len__(self) -> int:
        return len(self.user_ids)

    def __iter__(self) -> Iterator[str]:
        return iter(self.user_ids)

    def __contains__(self, user_id: object) -> bool:
        return user_id in self.index

    @property
    def index(self) -> dict:
        if self._index is None:
            self._index = {u: i for i, u in enumerate(self.user_ids)}
        return self._index

    @property
    def owner(self) -> np.ndarray:
        """User position of every event."""
        return np.repeat(np.arange(len(self.user_ids)), np.diff(self.offsets))

    def __getitem__(self, user_id: str) -> Trajectory:
        i = self.index[user_id]
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return Trajectory(user_id, self.minute[lo:hi], self.tower_ids[self.tower[lo:hi]])


def build_trajectories(records: CallRecords, retained) -> Trajectories:
    """Group each retained user's outgoing calls into a time-ordered trajectory.

    ``retained`` is a set of user ids or a boolean mask over
    ``records.user_ids``. Equal timestamps keep file order.
    """
    mask = _as_mask(records, retained)
    idx = np.flatnonzero(mask[records.caller])
    caller = records.caller[idx].astype(np.int64)
    order = np.lexsort((records.minute[idx], caller))
    idx = idx[order]
    users = np.flatnonzero(mask)
    counts = np.bincount(records.caller[idx], minlength=len(mask))[users]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return Trajectories(
        user_ids=records.user_ids[users],
        offsets=offsets,
        minute=records.minute[idx],
        tower=records.tower[idx],
        tower_ids=records.tower_ids,
    )


class CallGraph:
    """Reciprocated call graph over a fixed user population.

    Edges are stored once per unordered pair ``u < v`` (positions in
    ``user_ids``) with both directed call counts. Users with no edge are
    still members of the population.
    """

    def __init__(self, user_ids, u, v, calls_uv, calls_vu):
        self.user_ids = np.asarray(user_ids, dtype=object)
        self.u = np.asarray(u, dtype=np.int64)
        self.v = np.asarray(v, dtype=np.int64)
        self.calls_uv = np.asarray(calls_uv, dtype=np.int64)
        self.calls_vu = np.asarray(calls_vu, dtype=np.int64)
        if np.any(self.u >= self.v):
            raise ValueError("edges must be stored with u < v")
        if np.any(self.calls_uv < 1) or np.any(self.calls_vu < 1):
            raise ValueError("every edge needs at least one call in each direction")
        self.index = {x: i for i, x in enumerate(self.user_ids)}
        self._adj = None

    def __len__(self) -> int:
        return len(self.u)

    def __contains__(self, user_id: object) -> bool:
        return user_id in self.index

    def _node(self, user_id: str) -> int:
        try:
            return self.index[user_id]
        except KeyError:
            raise KeyError(f"user {user_id!r} is not in the call-graph population") from None

    def _adjacency(self):
        if self._adj is None:
            n = len(self.user_ids)
            src = np.concatenate([self.u, self.v])
            dst = np.concatenate([self.v, self.u])
            out = np.concatenate([self.calls_uv, self.calls_vu])
            back = np.concatenate([self.calls_vu, self.calls_uv])
            order = np.lexsort((dst, src))
            offsets = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))])
            self._adj = (offsets, dst[order], out[order], back[order])
        return self._adj

    def degree(self, user_id: str) -> int:
        offsets = self._adjacency()[0]
        i = self._node(user_id)
        return int(offsets[i + 1] - offsets[i])

    def contact_calls(self, user_id: str) -> dict[str, int]:
        """Total calls (both directions) with each reciprocated contact."""
        offsets, dst, out, back = self._adjacency()
        i = self._node(user_id)
        lo, hi = offsets[i], offsets[i + 1]
        return {self.user_ids[j]: int(a + b) for j, a, b in zip(dst[lo:hi], out[lo:hi], back[lo:hi])}

    def calls(self, a: str, b: str) -> tuple[int, int]:
        """(calls a->b, calls b->a) on the edge; (0, 0) when there is no edge."""
        offsets, dst, out, back = self._adjacency()
        i, j = self._node(a), self._node(b)
        lo, hi = offsets[i], offsets[i + 1]
        k = lo + np.searchsorted(dst[lo:hi], j)
        if k < hi and dst[k] == j:
            return int(out[k]), int(back[k])
        return 0, 0

    def has_edge(self, a: str, b: str) -> bool:
        return self.calls(a, b) != (0, 0)

    def node_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """(node, total calls) pairs, two per edge, ordered by node then neighbour."""
        offsets, dst, out, back = self._adjacency()
        node = np.repeat(np.arange(len(self.user_ids)), np.diff(offsets))
        return node, out + back


def build_call_graph(records: CallRecords, retained) -> CallGraph:
    """Link two retained users iff each called the other at least once."""
    mask = _as_mask(records, retained)
    users = np.flatnonzero(mask)
    new_code = np.cumsum(mask) - 1
    both = mask[records.caller] & mask[records.callee]
    a = new_code[records.caller[both]].astype(np.int64)
    b = new_code[records.callee[both]].astype(np.int64)
    n = max(len(users), 1)
    keys, counts = np.unique(a * n + b, return_counts=True)
    rev = (keys % n) * n + keys // n
    pos = np.searchsorted(keys, rev)
    pos_c = np.minimum(pos, max(len(keys) - 1, 0))
    reciprocated = (pos < len(keys)) & (keys[pos_c] == rev) if len(keys) else np.zeros(0, bool)
    src, dst = keys // n, keys % n
    fwd = reciprocated & (src < dst)
    return CallGraph(
        user_ids=records.user_ids[users],
        u=src[fwd],
        v=dst[fwd],
        calls_uv=counts[fwd],
        calls_vu=counts[pos_c[fwd]],
    )


def window_from_config(start: str | dt.date | None, end: str | dt.date | None) -> ObservationWindow | None:
    if start is None and end is None:
        return None
    if start is None or end is None:
        raise ValueError("observation.start and observation.end must be given together")
    to_date = lambda d: d if isinstance(d, dt.date) else dt.date.fromisoformat(str(d))
    return ObservationWindow(to_date(start), to_date(end))


def min_calls_retained(window: ObservationWindow, min_rate: float = 0.5) -> int:
    """Smallest outgoing-call count that passes the activity filter."""
    return math.floor(min_rate * window.length_days) + 1
