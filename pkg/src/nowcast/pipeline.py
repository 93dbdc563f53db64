"""Pipeline stages, their on-disk artifacts and the manifest chain.

Each stage reads the artifacts of the stages before it, writes its own
files atomically under ``<output>/<stage>/`` and finishes by writing
``manifest.json``: the hash of the settings it used, the SHA-256 of every
file it read, and the SHA-256 and row count of every file it wrote. A
stage's manifest is written last, so its presence marks completion.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import warnings
from pathlib import Path
from typing import Callable

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc

from ._io import (
    fmt,
    fmt_array,
    read_csv_strings,
    sha256_file,
    write_csv,
    write_csv_rows,
    write_csv_table,
    write_json,
)
from .classify import run_c1_c2
from .config import PipelineConfig, config_hash
from .errors import DataError, MissingArtifactError, ValidationError
from .ingest import (
    CallGraph,
    TowerTable,
    Trajectories,
    _encode_sorted,
    _parse_minutes,
    build_call_graph,
    build_trajectories,
    min_calls_retained,
    parse_cdr,
    parse_towers,
    retained_mask,
    window_from_config,
)
from .measures import ProfileTable, compute_all_profiles
from .regression import (
    CV_COLUMNS,
    RELERR_COLUMNS,
    TARGETS,
    cross_validate,
    fit_report,
    model_data,
)
from .statistics import (
    CORRELATION_COLUMNS,
    DECILE_COLUMNS,
    decile_summary,
    null_model_indicators,
    null_model_users,
    pearson,
)
from .territory import (
    AGGREGATE_COLUMNS,
    MAPPING_COLUMNS,
    MEASURES,
    REGION_COLUMNS,
    AggregateTable,
    RegionTable,
    UserAssignment,
    aggregate,
    assign_users,
    load_geometry,
    load_regions,
    load_tower_mapping,
    map_tower_to_region,
)

log = logging.getLogger(__name__)

STAGES = ("ingest", "measures", "aggregate", "correlate", "nullmodel", "regress", "classify", "report")
PREREQUISITES = {
    "ingest": (),
    "measures": ("ingest",),
    "aggregate": ("measures",),
    "correlate": ("aggregate",),
    "nullmodel": ("measures", "aggregate"),
    "regress": ("aggregate",),
    "classify": ("aggregate",),
    "report": ("correlate", "nullmodel", "regress", "classify"),
}
# settings each stage's outputs depend on (workers and paths never do)
SETTINGS = {
    "ingest": ("start", "end", "min_rate"),
    "measures": ("night_start", "night_end"),
    "aggregate": ("population_floor", "min_users", "cutoff_km"),
    "correlate": (),
    "nullmodel": ("nm_repetitions", "seed"),
    "regress": ("cv_repetitions", "cv_train_fraction", "seed"),
    "classify": ("trees", "features_per_split", "min_leaf", "class_train_fraction", "seed"),
    "report": (),
}
RANDOMIZED = {"nullmodel", "regress", "classify"}
INDICATORS = ("DI", "PCI")
PAIRS = tuple((m, i) for m in MEASURES for i in INDICATORS)

EVENT_COLUMNS = ("user_id", "timestamp", "tower")
GRAPH_COLUMNS = ("u", "v", "calls_uv", "calls_vu")
PROFILE_COLUMNS = ("user_id", "SV", "SD", "MV", "MD", "home_tower")
ASSIGNMENT_COLUMNS = ("user_id", "home_tower", "region_id")
SCATTER_COLUMNS = ("region_id", "user_count", "SV", "SD", "MV", "MD", "PD", "DI", "PCI", "DI_decile", "PCI_decile")
INDICATOR_COLUMNS = ("region_id", "DI", "PCI")
REPORT_CORRELATION_COLUMNS = ("model",) + CORRELATION_COLUMNS
MANIFEST = "manifest.json"


# manifests

def manifest_path(out: Path, stage: str) -> Path:
    return Path(out) / stage / MANIFEST


def read_manifest(out: Path, stage: str) -> dict | None:
    p = manifest_path(out, stage)
    if not p.is_file():
        return None
    return json.loads(p.read_text("utf-8"))


class StageRun:
    """Bookkeeping for one stage execution: what it read and what it wrote."""

    def __init__(self, cfg: PipelineConfig, stage: str):
        self.cfg = cfg
        self.stage = stage
        self.out = Path(cfg.output)
        self.dir = self.out / stage
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, dict] = {}
        self.manifests = {s: require_stage(self.out, s) for s in PREREQUISITES[stage]}
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest_path(self.out, stage).unlink(missing_ok=True)

    def consume(self, stage: str, name: str) -> Path:
        """Path of a verified output of a prerequisite stage."""
        key = f"{stage}/{name}"
        entry = self.manifests[stage]["outputs"].get(key)
        if entry is None:
            raise MissingArtifactError(f"{key} is not an output of {stage}; run `nowcast {stage}` first", stage)
        self.inputs[key] = entry["sha256"]
        return self.out / key

    def external(self, key: str, path: Path) -> Path:
        self.inputs[key] = sha256_file(path)
        return path

    def _record(self, name: str, rows: int | None) -> None:
        key = f"{self.stage}/{name}"
        entry = {"sha256": sha256_file(self.out / key)}
        if rows is not None:
            entry["rows"] = rows
        self.outputs[key] = entry

    def csv(self, name: str, header, columns) -> int:
        rows = write_csv(self.dir / name, header, columns)
        self._record(name, rows)
        return rows

    def csv_table(self, name: str, header, table: pa.Table) -> int:
        rows = write_csv_table(self.dir / name, header, table)
        self._record(name, rows)
        return rows

    def csv_rows(self, name: str, header, rows) -> int:
        n = write_csv_rows(self.dir / name, header, rows)
        self._record(name, n)
        return n

    def json(self, name: str, obj) -> None:
        write_json(self.dir / name, obj)
        self._record(name, None)

    def finish(self) -> dict:
        settings = self.cfg.settings(SETTINGS[self.stage])
        manifest = {
            "stage": self.stage,
            "config_hash": config_hash(settings),
            "settings": settings,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": self.outputs,
        }
        write_json(manifest_path(self.out, self.stage), manifest)
        return manifest


def require_stage(out: Path, stage: str) -> dict:
    """Manifest of a completed stage whose outputs are still intact."""
    manifest = read_manifest(out, stage)
    if manifest is None:
        raise MissingArtifactError(f"no {stage} artifacts in {out}; run `nowcast {stage}` first", stage)
    for key, entry in manifest["outputs"].items():
        p = Path(out) / key
        if not p.is_file():
            raise MissingArtifactError(f"{p} is missing; run `nowcast {stage}` first", stage)
        if sha256_file(p) != entry["sha256"]:
            raise MissingArtifactError(f"{p} changed since {stage} wrote it; rerun `nowcast {stage}`", stage)
    return manifest


def verify_chain(out: Path) -> list[str]:
    """Stages whose recorded inputs no longer match their producers' outputs."""
    stale = []
    manifests = {s: read_manifest(out, s) for s in STAGES}
    for stage, m in manifests.items():
        if m is None:
            continue
        for key, sha in m["inputs"].items():
            producer = key.split("/")[0]
            if producer not in manifests:
                continue
            pm = manifests[producer]
            if pm is None or pm["outputs"].get(key, {}).get("sha256") != sha:
                stale.append(stage)
                break
    return stale


# artifact readers

def _dict_column(codes: np.ndarray, values) -> pa.DictionaryArray:
    return pa.DictionaryArray.from_arrays(pa.array(np.asarray(codes, dtype=np.int32)),
                                          pa.array(list(values), type=pa.string()))


def _minute_column(minutes: np.ndarray) -> pa.DictionaryArray:
    uniq, inverse = np.unique(minutes, return_inverse=True)
    text = np.datetime_as_string(uniq.astype("datetime64[m]"), unit="m")
    text = np.char.replace(np.char.replace(text, "-", "/"), "T", " ")
    return _dict_column(inverse, text.tolist())


def _floats(col) -> np.ndarray:
    return np.array([float(v) if v != "" else math.nan for v in col.to_pylist()], dtype=float)


def _strings(col) -> np.ndarray:
    return np.array(col.to_pylist(), dtype=object)


def _opt_fmt(values) -> list[str]:
    return ["" if not np.isfinite(v) else fmt(v) for v in np.asarray(values, dtype=float)]


def read_events(path: Path, towers: TowerTable) -> Trajectories:
    table = read_csv_strings(path, EVENT_COLUMNS)
    user_ids, codes = _encode_sorted(table["user_id"])
    minutes = _parse_minutes(table["timestamp"])
    tower = pc.index_in(table["tower"], value_set=pa.array(list(towers.ids), pa.string()))
    tower = pc.fill_null(tower, -1).to_numpy(zero_copy_only=False).astype(np.int64)
    if np.any(minutes < 0) or np.any(tower < 0):
        raise DataError(f"{path}: unreadable timestamp or unknown tower")
    order = np.lexsort((minutes, codes))  # stable: equal stamps keep file order
    counts = np.bincount(codes, minlength=len(user_ids))
    return Trajectories(
        user_ids=user_ids,
        offsets=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        minute=minutes[order].astype(np.int64),
        tower=tower[order].astype(np.int32),
        tower_ids=towers.ids,
    )


def read_graph(path: Path, user_ids: np.ndarray) -> CallGraph:
    table = read_csv_strings(path, GRAPH_COLUMNS)
    ids = user_ids.astype(str)

    def code(col):
        names = np.array(table[col].to_pylist(), dtype=str)
        pos = np.searchsorted(ids, names)
        if len(names) and (np.any(pos >= len(ids)) or np.any(ids[np.minimum(pos, len(ids) - 1)] != names)):
            raise DataError(f"{path}: edge endpoint outside the retained population")
        return pos

    ints = lambda col: np.array(table[col].to_pylist(), dtype=np.int64)
    return CallGraph(user_ids, code("u"), code("v"), ints("calls_uv"), ints("calls_vu"))


def read_profiles(path: Path) -> ProfileTable:
    table = read_csv_strings(path, PROFILE_COLUMNS)
    return ProfileTable(
        user_ids=_strings(table["user_id"]),
        sv=np.array(table["SV"].to_pylist(), dtype=np.int64),
        sd=_floats(table["SD"]),
        mv=_floats(table["MV"]),
        md=_floats(table["MD"]),
        home_tower=_strings(table["home_tower"]),
    )


def read_assignments(path: Path) -> UserAssignment:
    table = read_csv_strings(path, ASSIGNMENT_COLUMNS)
    regions = np.array([r if r else None for r in table["region_id"].to_pylist()], dtype=object)
    return UserAssignment(_strings(table["user_id"]), regions, int(np.sum(regions == None)))  # noqa: E711


def read_aggregates(path: Path) -> AggregateTable:
    table = read_csv_strings(path, AGGREGATE_COLUMNS)
    means = np.column_stack([_floats(table[f"mean_{m}"]) for m in MEASURES]) if table.num_rows else np.zeros((0, 4))
    return AggregateTable(_strings(table["region_id"]), np.array(table["user_count"].to_pylist(), dtype=np.int64),
                          means)


def read_rows(path: Path, header) -> list[dict]:
    table = read_csv_strings(path, header)
    return table.to_pylist()


def _write_aggregates(run: StageRun, name: str, agg: AggregateTable) -> int:
    return run.csv(name, AGGREGATE_COLUMNS, [agg.region_ids, agg.user_count] +
                   [fmt_array(agg.means[:, j]) for j in range(4)])


def _joined(agg: AggregateTable, regions: RegionTable) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Region ids present in both tables, with every measure and indicator column."""
    pos = {r.region_id: i for i, r in enumerate(regions)}
    keep = np.array([rid in pos for rid in agg.region_ids], dtype=bool)
    tpos = np.array([pos[rid] for rid in agg.region_ids[keep]], dtype=np.int64)
    cols = {m: agg.column(m)[keep] for m in MEASURES}
    cols["user_count"] = agg.user_count[keep]
    for name in ("PD",) + INDICATORS:
        cols[name] = regions.column(name)[tpos] if len(tpos) else np.zeros(0)
    return agg.region_ids[keep], cols


def _correlate_pairs(cols: dict, indicators: dict | None = None, label: str = ""):
    """Correlation and decile summary of every measure-indicator pair."""
    indicators = indicators or cols
    results, deciles = [], {}
    for m, ind in PAIRS:
        x, y = cols[m], indicators[ind]
        ok = np.isfinite(x) & np.isfinite(y)
        if ok.sum() < 10:
            raise ValidationError(f"{label}{m} vs {ind}: only {int(ok.sum())} regions with data, need 10")
        results.append(pearson(x[ok], y[ok], m, ind))
        deciles[(m, ind)] = decile_summary(x[ok], y[ok])
    return results, deciles


def _write_correlations(run: StageRun, name: str, results) -> None:
    rows = [r.row() for r in results]
    run.csv(name, CORRELATION_COLUMNS, [
        [r[0] for r in rows], [r[1] for r in rows], [fmt(r[2]) for r in rows], [fmt(r[3]) for r in rows],
        [r[4] for r in rows],
    ])


def _write_deciles(run: StageRun, prefix: str, deciles) -> None:
    for (m, ind), d in deciles.items():
        rows = list(d.rows())
        run.csv(f"{prefix}{m}_{ind}.csv", DECILE_COLUMNS, [
            [r[0] for r in rows], *[[fmt(r[k]) for r in rows] for k in (1, 2, 3, 4)], [r[5] for r in rows],
        ])


def _decile_of(values: np.ndarray) -> list[str]:
    """1-based decile membership by stable rank; blank where the value is missing."""
    out = [""] * len(values)
    ok = np.flatnonzero(np.isfinite(values))
    if len(ok) >= 10:
        order = ok[np.argsort(values[ok], kind="stable")]
        for b, group in enumerate(np.array_split(order, 10), start=1):
            for i in group:
                out[i] = str(b)
    return out


# stages

def run_ingest(cfg: PipelineConfig) -> dict:
    cfg.require_inputs("cdr", "towers")
    run = StageRun(cfg, "ingest")
    towers = parse_towers(run.external("inputs.towers", cfg.towers))
    window = window_from_config(cfg.start, cfg.end)
    parsed = parse_cdr(run.external("inputs.cdr", cfg.cdr), towers, window)
    rec = parsed.records
    mask = retained_mask(rec, parsed.window, cfg.min_rate)
    traj = build_trajectories(rec, mask)
    graph = build_call_graph(rec, mask)

    owner = traj.owner
    events = pa.table({
        "user_id": _dict_column(owner, traj.user_ids.tolist()),
        "timestamp": _minute_column(traj.minute),
        "tower": _dict_column(traj.tower, towers.ids.tolist()),
    })
    run.csv_table("events.csv", EVENT_COLUMNS, events)
    uid = graph.user_ids
    run.csv_table("graph.csv", GRAPH_COLUMNS, pa.table({
        "u": _dict_column(graph.u, uid.tolist()),
        "v": _dict_column(graph.v, uid.tolist()),
        "calls_uv": pa.array(graph.calls_uv).cast(pa.string()),
        "calls_vu": pa.array(graph.calls_vu).cast(pa.string()),
    }))
    s = parsed.stats
    run.json("summary.json", {
        "window": {"start": parsed.window.start.isoformat(), "end": parsed.window.end.isoformat(),
                   "length_days": parsed.window.length_days, "configured": window is not None},
        "min_rate": cfg.min_rate,
        "min_calls_retained": min_calls_retained(parsed.window, cfg.min_rate),
        "rows": s.rows,
        "malformed": s.malformed,
        "dropped_unknown_tower": s.dropped_unknown_tower,
        "dropped_out_of_window": s.dropped_out_of_window,
        "records_kept": s.kept,
        "users_seen": len(rec.user_ids),
        "users_retained": len(traj.user_ids),
        "retained_outgoing_calls": int(len(traj.minute)),
        "edges": len(graph),
    })
    return run.finish()


def run_measures(cfg: PipelineConfig) -> dict:
    cfg.require_inputs("towers")
    run = StageRun(cfg, "measures")
    towers = parse_towers(run.external("inputs.towers", cfg.towers))
    traj = read_events(run.consume("ingest", "events.csv"), towers)
    graph = read_graph(run.consume("ingest", "graph.csv"), traj.user_ids)
    profiles = compute_all_profiles(traj, graph, towers, night=cfg.night, workers=cfg.workers)
    run.csv("profiles.csv", PROFILE_COLUMNS, [
        profiles.user_ids, profiles.sv, fmt_array(profiles.sd), fmt_array(profiles.mv), fmt_array(profiles.md),
        profiles.home_tower,
    ])
    return run.finish()


def run_aggregate(cfg: PipelineConfig) -> dict:
    cfg.require_inputs("towers", "regions")
    if cfg.tower_regions is None and cfg.geometry is None:
        raise ValidationError("aggregate needs inputs.tower_regions, inputs.geometry, or both")
    cfg.require_inputs(*[k for k in ("tower_regions", "geometry") if getattr(cfg, k) is not None])
    run = StageRun(cfg, "aggregate")
    profiles = read_profiles(run.consume("measures", "profiles.csv"))
    regions = load_regions(run.external("inputs.regions", cfg.regions), cfg.population_floor)
    towers = parse_towers(run.external("inputs.towers", cfg.towers))
    mapping = geometry = None
    if cfg.tower_regions is not None:
        mapping = load_tower_mapping(run.external("inputs.tower_regions", cfg.tower_regions))
    if cfg.geometry is not None:
        geometry = load_geometry(run.external("inputs.geometry", cfg.geometry))
    ta = map_tower_to_region(towers, regions, mapping, geometry, cfg.cutoff_km)
    # towers of regions below the population floor place nobody
    usable = {t: r for t, r in ta.regions.items() if r in regions}
    assignment = assign_users(profiles, usable)
    agg = aggregate(profiles, assignment, cfg.min_users)
    if len(agg) == 0:
        raise DataError("no region received any user; check the tower-to-region inputs")

    tower_ids = sorted(ta.regions)
    run.csv("tower_regions.csv", MAPPING_COLUMNS, [tower_ids, [ta.regions[t] for t in tower_ids]])
    run.csv("assignments.csv", ASSIGNMENT_COLUMNS, [
        assignment.user_ids, profiles.home_tower, ["" if r is None else r for r in assignment.region_ids],
    ])
    _write_aggregates(run, "aggregates.csv", agg)
    kept = list(regions)
    run.csv_rows("regions.csv", REGION_COLUMNS, zip(
        [r.region_id for r in kept], [r.name for r in kept], [fmt(r.population) for r in kept],
        [fmt(r.area) for r in kept], _opt_fmt([r.deprivation_index for r in kept]),
        _opt_fmt([r.per_capita_income for r in kept]),
    ))
    run.json("summary.json", {
        "users": len(profiles),
        "users_assigned": int(assignment.assigned.sum()),
        "users_dropped": assignment.dropped,
        "regions_in_table": len(regions),
        "regions_below_population_floor": regions.excluded,
        "regions_with_users": len(agg),
        "regions_below_min_users": agg.excluded,
        "towers": len(towers),
        "towers_explicit": ta.explicit,
        "towers_by_containment": ta.by_containment,
        "towers_by_nearest_centroid": ta.by_nearest,
        "towers_unassigned": len(ta.unassigned),
        "towers_in_excluded_regions": len(ta.regions) - len(usable),
    })
    return run.finish()


def _load_region_side(run: StageRun, cfg: PipelineConfig) -> tuple[AggregateTable, RegionTable]:
    agg = read_aggregates(run.consume("aggregate", "aggregates.csv"))
    regions = load_regions(run.consume("aggregate", "regions.csv"), cfg.population_floor)
    return agg, regions


def run_correlate(cfg: PipelineConfig) -> dict:
    run = StageRun(cfg, "correlate")
    agg, regions = _load_region_side(run, cfg)
    ids, cols = _joined(agg, regions)
    results, deciles = _correlate_pairs(cols)
    _write_correlations(run, "correlations.csv", results)
    _write_deciles(run, "deciles_", deciles)
    run.csv("scatter.csv", SCATTER_COLUMNS, [
        ids, cols["user_count"], *[fmt_array(cols[m]) for m in MEASURES],
        *[_opt_fmt(cols[c]) for c in ("PD", "DI", "PCI")], _decile_of(cols["DI"]), _decile_of(cols["PCI"]),
    ])
    return run.finish()


def run_nullmodel(cfg: PipelineConfig) -> dict:
    seed = cfg.require_seed("nullmodel")
    run = StageRun(cfg, "nullmodel")
    profiles = read_profiles(run.consume("measures", "profiles.csv"))
    assignment = read_assignments(run.consume("aggregate", "assignments.csv"))
    agg, regions = _load_region_side(run, cfg)
    if not np.array_equal(profiles.user_ids, assignment.user_ids):
        raise MissingArtifactError("assignments do not match the profiles; rerun `nowcast aggregate`", "aggregate")

    # NM1: users redistributed over regions of unchanged size
    nm1 = null_model_users(profiles, assignment, cfg.nm_repetitions, seed, cfg.workers)
    keep = np.isin(nm1.region_ids.astype(str), agg.region_ids.astype(str))
    nm1 = AggregateTable(nm1.region_ids[keep], nm1.user_count[keep], nm1.means[keep])
    _write_aggregates(run, "nm1_aggregates.csv", nm1)
    _, cols1 = _joined(nm1, regions)
    res1, dec1 = _correlate_pairs(cols1, label="NM1 ")
    _write_correlations(run, "nm1_correlations.csv", res1)
    _write_deciles(run, "nm1_deciles_", dec1)

    # NM2: indicators shuffled over the regions that have both
    ids, cols = _joined(agg, regions)
    both = np.isfinite(cols["DI"]) & np.isfinite(cols["PCI"])
    shuffled = null_model_indicators({k: cols[k][both] for k in INDICATORS}, cfg.nm_repetitions, seed, cfg.workers)
    run.csv("nm2_indicators.csv", INDICATOR_COLUMNS, [ids[both], *[fmt_array(shuffled[k]) for k in INDICATORS]])
    cols2 = {k: v[both] for k, v in cols.items()}
    res2, dec2 = _correlate_pairs(cols2, shuffled, label="NM2 ")
    _write_correlations(run, "nm2_correlations.csv", res2)
    _write_deciles(run, "nm2_deciles_", dec2)
    return run.finish()


def run_regress(cfg: PipelineConfig) -> dict:
    seed = cfg.require_seed("regress")
    run = StageRun(cfg, "regress")
    agg, regions = _load_region_side(run, cfg)
    for model, target in TARGETS.items():
        data = model_data(agg, regions, target)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = fit_report(data, seed=seed)
        for w in report["vif_warnings"]:
            log.warning("%s: %s", model, w)
        cv = cross_validate(data.X, data.y, data.region_ids, cfg.cv_repetitions, cfg.cv_train_fraction, seed,
                            cfg.workers)
        report["cv"] = {
            "repetitions": len(cv),
            "train_fraction": cfg.cv_train_fraction,
            "undefined_cv_rmse": cv.undefined_cv,
            "zero_targets": cv.zero_targets,
        }
        key = model.lower()
        run.json(f"{key}.json", report)
        rows = list(cv.rows())
        run.csv(f"cv_{key}.csv", CV_COLUMNS, [[r[0] for r in rows], *[[fmt(r[k]) for r in rows] for k in (1, 2, 3)]])
        seen = cv.rel_err_count > 0
        run.csv(f"relerr_{key}.csv", RELERR_COLUMNS, [data.region_ids[seen], fmt_array(cv.mean_rel_err[seen])])
    return run.finish()


def run_classify(cfg: PipelineConfig) -> dict:
    seed = cfg.require_seed("classify")
    run = StageRun(cfg, "classify")
    agg, regions = _load_region_side(run, cfg)
    di, pci = model_data(agg, regions, "DI"), model_data(agg, regions, "PCI")
    reports = run_c1_c2(di, pci, seed, cfg.class_train_fraction, cfg.trees, cfg.features_per_split, cfg.min_leaf,
                        cfg.workers)
    for name, rep in reports.items():
        run.json(f"{name.lower()}.json", rep)
    return run.finish()


def _numbers(rows: list[dict], skip=()) -> list[dict]:
    out = []
    for r in rows:
        out.append({k: (v if k in skip else int(v) if v.lstrip("-").isdigit() else float(v) if v not in ("", "nan")
                        else None) for k, v in r.items()})
    return out


def _distribution(values: np.ndarray) -> dict:
    v = values[np.isfinite(values)]
    if not len(v):
        return {"count": 0}
    q = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {"count": int(len(v)), "mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
            "min": float(v.min()), "q05": q[0], "q25": q[1], "median": q[2], "q75": q[3], "q95": q[4],
            "max": float(v.max())}


def missing_stages(out: Path, stages=PREREQUISITES["report"]) -> list[str]:
    """Stages whose artifacts a report needs but cannot find (transitively)."""
    needed, stack = [], list(stages)
    while stack:
        s = stack.pop(0)
        if s not in needed:
            needed.append(s)
            stack.extend(PREREQUISITES[s])
    return [s for s in STAGES if s in needed and read_manifest(out, s) is None]


def run_report(cfg: PipelineConfig) -> dict:
    out = Path(cfg.output)
    missing = missing_stages(out)
    if missing:
        raise MissingArtifactError("report needs the missing stages: " + ", ".join(missing), missing[0])
    stale = verify_chain(out)
    if stale:
        raise MissingArtifactError("artifacts out of date; rerun: " + ", ".join(stale), stale[0])
    run = StageRun(cfg, "report")

    def rows(stage, name, header):
        return read_rows(run.consume(stage, name), header)

    corr = {label: _numbers(rows(stage, name, CORRELATION_COLUMNS), skip=("x", "y"))
            for label, stage, name in (("observed", "correlate", "correlations.csv"),
                                       ("nm1", "nullmodel", "nm1_correlations.csv"),
                                       ("nm2", "nullmodel", "nm2_correlations.csv"))}
    pairs = []
    for i, (m, ind) in enumerate(PAIRS):
        entry = dict(corr["observed"][i])
        for label in ("nm1", "nm2"):
            r = corr[label][i]
            entry[label] = {"rho": r["rho"], "p_value": r["p_value"], "n": r["n"]}
        pairs.append(entry)
    table = [(label, r) for label in ("observed", "nm1", "nm2") for r in corr[label]]
    run.csv("correlations.csv", REPORT_CORRELATION_COLUMNS, [
        [t[0] for t in table], *[[fmt(t[1][c]) if isinstance(t[1][c], float) else t[1][c] for t in table]
                                 for c in CORRELATION_COLUMNS],
    ])

    deciles = {}
    for label, stage, prefix in (("observed", "correlate", "deciles_"), ("nm1", "nullmodel", "nm1_deciles_"),
                                 ("nm2", "nullmodel", "nm2_deciles_")):
        deciles[label] = {f"{m}_{ind}": _numbers(rows(stage, f"{prefix}{m}_{ind}.csv", DECILE_COLUMNS))
                          for m, ind in PAIRS}

    regression, cv = {}, {}
    for model in TARGETS:
        key = model.lower()
        regression[model] = json.loads(run.consume("regress", f"{key}.json").read_text("utf-8"))
        exp = _numbers(rows("regress", f"cv_{key}.csv", CV_COLUMNS))
        rel = _numbers(rows("regress", f"relerr_{key}.csv", RELERR_COLUMNS), skip=("region_id",))
        cv[model] = {
            "experiments": len(exp),
            **{c: _distribution(np.array([e[c] if e[c] is not None else math.nan for e in exp], dtype=float))
               for c in ("r2", "rmse", "cv_rmse")},
            "relative_error": _distribution(np.array([r["mean_rel_err"] for r in rel], dtype=float)),
        }
    classification = {name.upper(): json.loads(run.consume("classify", f"{name}.json").read_text("utf-8"))
                      for name in ("c1", "c2")}
    bundle = {
        "correlations": pairs,
        "deciles": deciles,
        "regression": regression,
        "cross_validation": cv,
        "classification": classification,
        "provenance": {s: read_manifest(out, s)["config_hash"] for s in STAGES if s != "report"},
    }
    run.json("bundle.json", bundle)
    return run.finish()


RUNNERS: dict[str, Callable[[PipelineConfig], dict]] = {
    "ingest": run_ingest,
    "measures": run_measures,
    "aggregate": run_aggregate,
    "correlate": run_correlate,
    "nullmodel": run_nullmodel,
    "regress": run_regress,
    "classify": run_classify,
    "report": run_report,
}


def run_stage(stage: str, cfg: PipelineConfig) -> dict:
    if stage not in RUNNERS:
        raise ValidationError(f"unknown stage {stage!r}")
    if stage in RANDOMIZED:
        cfg.require_seed(stage)
    started = dt.datetime.now()
    manifest = RUNNERS[stage](cfg)
    log.info("%s finished in %.1f s", stage, (dt.datetime.now() - started).total_seconds())
    return manifest


def run_pipeline(cfg: PipelineConfig) -> dict[str, dict]:
    """Every stage in order; the seed must be given up front."""
    cfg.require_seed("pipeline")
    return {stage: run_stage(stage, cfg) for stage in STAGES}
