import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nowcast.errors import DataError
from nowcast.ingest import TowerTable
from nowcast.measures import ProfileTable
from nowcast.territory import (
    aggregate,
    assign_users,
    load_geometry,
    load_regions,
    load_tower_mapping,
    locate_points,
    map_tower_to_region,
)

from conftest import write_lines

HEADER = "region_id,name,population,area_km2,deprivation_index,per_capita_income"


def square(x0, y0, size):
    return [[x0, y0], [x0 + size, y0], [x0 + size, y0 + size], [x0, y0 + size], [x0, y0]]


def write_geojson(path, polys):
    feats = [
        {"type": "Feature", "properties": {"region_id": rid}, "geometry": {"type": "Polygon", "coordinates": [ring]}}
        for rid, ring in polys.items()
    ]
    path.write_text(json.dumps({"type": "FeatureCollection", "features": feats}))
    return path


def profiles(rows):
    """rows: (user, SV, SD, MV, MD, home)."""
    rows = sorted(rows)
    cols = list(zip(*rows))
    return ProfileTable(
        np.array(cols[0], dtype=object),
        np.array(cols[1], dtype=np.int64),
        np.array(cols[2], dtype=float),
        np.array(cols[3], dtype=float),
        np.array(cols[4], dtype=float),
        np.array(cols[5], dtype=object),
    )


# region loading

def test_population_floor(tmp_path):
    path = write_lines(tmp_path / "r.csv", [HEADER, "A,a,999,10,1.0,100", "B,b,1001,10,1.0,100", "C,c,1000,5,,"])
    table = load_regions(path)
    assert [r.region_id for r in table] == ["B"]
    assert table.excluded == 2


def test_population_density_and_absent_indicators(tmp_path):
    path = write_lines(tmp_path / "r.csv", [HEADER, "B,b,5000,12.5,,20000"])
    (region,) = load_regions(path)
    assert region.population_density == pytest.approx(400.0, rel=1e-12)
    assert math.isnan(region.deprivation_index)
    assert region.per_capita_income == 20000


def test_missing_indicator_column(tmp_path):
    path = write_lines(tmp_path / "r.csv", ["region_id,name,population,area_km2,per_capita_income", "B,b,5000,10,9"])
    (region,) = load_regions(path)
    assert math.isnan(region.deprivation_index)
    assert region.per_capita_income == 9


@pytest.mark.parametrize(
    "lines",
    [[], [HEADER], [HEADER, "A,a,5000,10,1,1", "A,b,6000,10,1,1"], ["id,name", "A,a"], [HEADER, "A,a,5000,0,1,1"]],
    ids=["empty", "header-only", "duplicate", "bad-header", "zero-area"],
)
def test_region_errors(tmp_path, lines):
    path = tmp_path / "r.csv"
    path.write_text("\n".join(lines))
    with pytest.raises(DataError):
        load_regions(path)


# tower mapping

def test_ray_casting_concave():
    # U shape: the notch (1.5, 2) is outside
    ring = np.array([[0, 0], [3, 0], [3, 3], [2, 3], [2, 1], [1, 1], [1, 3], [0, 3]], dtype=float)
    inside, edge = locate_points([0.5, 1.5, 2.5, 1.5, 4.0, 0.0], [2, 2, 2, 0.5, 1, 1.5], [ring])
    assert inside.tolist() == [True, False, True, True, False, True]
    assert edge.tolist() == [False, False, False, False, False, True]


def test_containment_edge_and_fallback(tmp_path):
    geo = load_geometry(write_geojson(tmp_path / "g.json", {"R2": square(0, 0, 1), "R1": square(1, 0, 1)}))
    towers = TowerTable(
        ["in2", "in1", "edge", "near", "far"],
        [0.5, 0.5, 0.5, 0.5, 5.0],
        [0.5, 1.5, 1.0, 2.02, 5.0],
    )
    res = map_tower_to_region(towers, geometry=geo)
    assert res.regions["in2"] == "R2"
    assert res.regions["in1"] == "R1"
    assert res.regions["edge"] == "R1"  # shared edge goes to the smallest id
    # 0.52 degrees of longitude at lat 0.5 from R1's centroid is ~58 km: outside the 10 km cutoff
    assert "near" in res.unassigned and "far" in res.unassigned
    res = map_tower_to_region(towers, geometry=geo, cutoff_km=60)
    assert res.regions["near"] == "R1"
    assert res.unassigned == ["far"]


def test_nearest_centroid_within_cutoff(tmp_path):
    geo = load_geometry(write_geojson(tmp_path / "g.json", {"R": square(2.0, 46.0, 0.01)}))
    # centroid at (46.005, 2.005); tower 3 km north of it
    dlat = 3.0 / 6371.0088 * 180 / math.pi
    towers = TowerTable(["t"], [46.005 + dlat], [2.005])
    res = map_tower_to_region(towers, geometry=geo)
    assert res.regions == {"t": "R"}
    assert res.by_nearest == 1


def test_explicit_mapping_wins(tmp_path):
    geo = load_geometry(write_geojson(tmp_path / "g.json", {"R": square(0, 0, 1)}))
    mapping = load_tower_mapping(write_lines(tmp_path / "m.csv", ["tower,region_id", "a,Q"]))
    towers = TowerTable(["a", "b"], [0.5, 0.5], [0.5, 0.6])
    res = map_tower_to_region(towers, mapping=mapping, geometry=geo)
    assert res.regions == {"a": "Q", "b": "R"}
    assert res.explicit == 1


def test_mapping_requires_a_source():
    with pytest.raises(ValueError):
        map_tower_to_region(TowerTable(["a"], [0], [0]))


def test_unassigned_warning(caplog):
    towers = TowerTable(["a", "b", "c"], [0, 0, 0], [0, 1, 2])
    with caplog.at_level(logging.WARNING):
        res = map_tower_to_region(towers, mapping={"a": "R"})
    assert res.unassigned == ["b", "c"]
    assert "could not be assigned" in caplog.text


# users and aggregation

def test_assign_users():
    prof = profiles([("u1", 1, 0.1, 1.0, 0.2, "t1"), ("u2", 2, 0.2, 2.0, 0.4, "t1"), ("u3", 1, 0.3, 1.0, 0.5, "t9")])
    assign = assign_users(prof, {"t1": "R"})
    assert assign.as_dict() == {"u1": "R", "u2": "R"}
    assert assign.dropped == 1


def test_aggregate_means():
    prof = profiles([
        ("u1", 1, 0.1, 1.0, 0.2, "t1"),
        ("u2", 3, 0.3, 2.0, 0.4, "t1"),
        ("u3", 5, 0.5, 7.0, 0.9, "t2"),
    ])
    agg = aggregate(prof, assign_users(prof, {"t1": "R", "t2": "S", "t3": "Empty"}))
    assert list(agg.region_ids) == ["R", "S"]
    r = agg["R"]
    assert r.mean_md == pytest.approx(0.3, abs=1e-15)
    assert (r.mean_sv, r.mean_mv, r.user_count) == (2.0, 1.5, 2)
    s = agg["S"]
    assert (s.mean_sv, s.mean_sd, s.mean_mv, s.mean_md) == (5, 0.5, 7.0, 0.9)
    with pytest.raises(KeyError):
        agg["Empty"]


def test_min_users():
    prof = profiles([("u1", 1, 0.1, 1.0, 0.2, "t1"), ("u2", 3, 0.3, 2.0, 0.4, "t1"), ("u3", 5, 0.5, 7.0, 0.9, "t2")])
    agg = aggregate(prof, assign_users(prof, {"t1": "R", "t2": "S"}), min_users=2)
    assert list(agg.region_ids) == ["R"] and agg.excluded == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_aggregate_properties(seed, n):
    rng = np.random.default_rng(seed)
    users = [f"u{i:03d}" for i in range(n)]
    homes = rng.choice(["t0", "t1", "t2", "t3", "t4"], size=n)
    sd, md = rng.random(n), rng.random(n)
    mv = rng.exponential(5, n)
    sv = rng.integers(0, 20, n)
    prof = profiles(list(zip(users, sv, sd, mv, md, homes)))
    mapping = {"t0": "A", "t1": "B", "t2": "A", "t3": "C"}
    assign = assign_users(prof, mapping)
    agg = aggregate(prof, assign)
    assert agg.user_count.sum() + assign.dropped == n
    assert np.all((agg.means[:, [1, 3]] >= 0) & (agg.means[:, [1, 3]] <= 1))
    assert np.all(agg.means[:, 2] >= 0)

    # same users in a different row order give bit-identical means
    perm = rng.permutation(n)
    shuffled = ProfileTable(*(getattr(prof, f)[perm] for f in ("user_ids", "sv", "sd", "mv", "md", "home_tower")))
    agg2 = aggregate(shuffled, assign_users(shuffled, mapping))
    assert np.array_equal(agg.means, agg2.means)
    assert np.array_equal(agg.region_ids, agg2.region_ids)
