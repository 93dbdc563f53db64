import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from nowcast._io import count_rows, sha256_file
from nowcast.cli import main
from nowcast.config import PipelineConfig, build_config, load_config
from nowcast.errors import ValidationError
from nowcast.pipeline import PAIRS, STAGES, verify_chain
from nowcast.statistics import pearson
from nowcast.synthgen import GeneratorConfig, generate_corpus

from conftest import measure_corpus

GEN = GeneratorConfig(users=2400, regions=48, seed=31)
FAST = ["--nm-repetitions", "20", "--cv-repetitions", "50", "--trees", "25"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    c = generate_corpus(GEN, root)
    (root / "pipeline.toml").write_text(
        "[inputs]\n"
        'cdr = "cdr.csv"\ntowers = "towers.csv"\nregions = "regions.csv"\ntower_regions = "tower_regions.csv"\n'
        "[observation]\n"
        f'start = "{GEN.window.start}"\nend = "{GEN.window.end}"\n'
    )
    return c


def run(corpus, out, *extra):
    return main(["pipeline", "--config", str(corpus.directory / "pipeline.toml"), "-o", str(out), *FAST, *extra])


@pytest.fixture(scope="module")
def done(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    assert run(corpus, out, "--seed", "5") == 0
    return out


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


# configuration

def test_config_file_and_flag_precedence(tmp_path):
    (tmp_path / "c.toml").write_text(
        '[inputs]\ncdr = "data/cdr.csv"\n[filter]\nmin_rate = 0.7\n[classify]\ntrees = 10\n[run]\nseed = 3\n'
    )
    cfg = load_config(tmp_path / "c.toml", {"classify.trees": 99})
    assert cfg.cdr == tmp_path / "data" / "cdr.csv"
    assert cfg.min_rate == 0.7 and cfg.trees == 99 and cfg.seed == 3
    assert cfg.nm_repetitions == 100 and cfg.cv_repetitions == 1000 and cfg.night == (1320, 420)


def test_config_rejections(tmp_path):
    with pytest.raises(ValidationError, match="unknown"):
        build_config({"filter.min_rat": 0.5})
    with pytest.raises(ValidationError):
        build_config({"nullmodel.repetitions": 0})
    with pytest.raises(ValidationError):
        build_config({"observation.start": "2007-09-01"})
    with pytest.raises(ValidationError):
        build_config({"regression.train_fraction": 1.0})
    with pytest.raises(ValidationError):
        build_config({"classify.trees": "many"})
    with pytest.raises(ValidationError):
        load_config(tmp_path / "absent.toml")


def test_workers_default_from_environment(monkeypatch):
    monkeypatch.setenv("NOWCAST_WORKERS", "6")
    assert PipelineConfig().workers == 6
    assert build_config(overrides={"run.workers": 2}).workers == 2


# exit codes

def test_stage_before_prerequisite_exits_2(corpus, tmp_path, capsys):
    code = main(["measures", "--config", str(corpus.directory / "pipeline.toml"), "-o", str(tmp_path / "o")])
    assert code == 2
    assert "nowcast ingest" in capsys.readouterr().err


def test_missing_seed_exits_3(corpus, tmp_path, capsys):
    assert run(corpus, tmp_path / "o") == 3
    assert "--seed" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
    assert main(["synth", "-o", str(tmp_path / "s"), "--users", "50", "--regions", "2"]) == 3


def test_missing_input_exits_3(tmp_path):
    assert main(["ingest", "--cdr", str(tmp_path / "nope.csv"), "--towers", str(tmp_path / "t.csv"),
                 "-o", str(tmp_path / "o")]) == 3


def test_malformed_data_exits_4(tmp_path):
    (tmp_path / "towers.csv").write_text("tower,latitude,longitude\nA,45,2\n")
    lines = ["timestamp,tower,caller,callee"] + ["2007/09/01 10:00,A,u1,u2"] * 50 + ["garbage,A,u1,u2"] * 2
    (tmp_path / "cdr.csv").write_text("\n".join(lines) + "\n")
    assert main(["ingest", "--cdr", str(tmp_path / "cdr.csv"), "--towers", str(tmp_path / "towers.csv"),
                 "-o", str(tmp_path / "o")]) == 4


# full chain

def test_manifest_chain(done):
    assert verify_chain(done) == []
    manifests = {s: json.loads((done / s / "manifest.json").read_text()) for s in STAGES}
    for stage, m in manifests.items():
        assert m["stage"] == stage and len(m["config_hash"]) == 64
        for key, entry in m["outputs"].items():
            assert sha256_file(done / key) == entry["sha256"]
            if key.endswith(".csv"):
                assert entry["rows"] == count_rows(done / key)
        for key, sha in m["inputs"].items():
            producer = key.split("/")[0]
            if producer in manifests:
                assert manifests[producer]["outputs"][key]["sha256"] == sha
    assert set(manifests["measures"]["inputs"]) == {"ingest/events.csv", "ingest/graph.csv", "inputs.towers"}


def test_rerun_is_byte_identical(corpus, done, tmp_path):
    out = tmp_path / "again"
    assert run(corpus, out, "--seed", "5", "--workers", "3") == 0
    assert tree_digest(out) == tree_digest(done)
    # a single stage rerun in place leaves its files unchanged
    before = tree_digest(done)
    assert main(["correlate", "-o", str(done)]) == 0
    assert tree_digest(done) == before


def test_other_seed_changes_only_randomized_stages(corpus, done, tmp_path):
    out = tmp_path / "seed6"
    assert run(corpus, out, "--seed", "6") == 0
    a, b = tree_digest(done), tree_digest(out)
    changed = {k.split("/")[0] for k in a if a[k] != b[k]}
    assert changed == {"nullmodel", "regress", "classify", "report"}


def test_bundle_contents(done):
    bundle = json.loads((done / "report" / "bundle.json").read_text())
    pairs = [(c["x"], c["y"]) for c in bundle["correlations"]]
    assert pairs == list(PAIRS) and len(pairs) == 8
    for c in bundle["correlations"]:
        assert {"rho", "p_value", "n", "nm1", "nm2"} <= set(c)
    assert set(bundle["deciles"]) == {"observed", "nm1", "nm2"}
    assert all(len(rows) == 10 for rows in bundle["deciles"]["observed"].values())
    assert set(bundle["regression"]) == {"M1", "M2"}
    assert set(bundle["regression"]["M1"]["lmg"]) == {"PD", "MD", "SD", "MV", "SV"}
    assert bundle["cross_validation"]["M1"]["experiments"] == 50
    assert set(bundle["classification"]) == {"C1", "C2"}
    assert "mean_decrease_gini" in bundle["classification"]["C1"]
    with open(done / "report" / "correlations.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 24


def test_pipeline_matches_library_route(corpus, done):
    _, _, agg, regions = measure_corpus(corpus, GEN.window)
    with open(done / "correlate" / "correlations.csv") as fh:
        rows = {(r["x"], r["y"]): float(r["rho"]) for r in csv.DictReader(fh)}
    for m, ind in PAIRS:
        direct = pearson(agg.column(m), regions.column(ind)).pearson_rho
        assert rows[(m, ind)] == pytest.approx(direct, abs=1e-7)
    with open(done / "aggregate" / "aggregates.csv") as fh:
        md = np.array([float(r["mean_MD"]) for r in csv.DictReader(fh)])
    assert np.allclose(md, agg.column("MD"), rtol=1e-8)


def test_numbers_have_nine_significant_digits(done):
    with open(done / "measures" / "profiles.csv") as fh:
        for r in csv.DictReader(fh):
            for k in ("SD", "MV", "MD"):
                digits = r[k].split("e")[0].replace("-", "").replace(".", "").lstrip("0")
                assert len(digits) <= 9


def test_report_lists_missing_stages(done, tmp_path, capsys):
    out = tmp_path / "partial"
    shutil.copytree(done, out)
    shutil.rmtree(out / "classify")
    shutil.rmtree(out / "report")
    assert main(["report", "-o", str(out)]) == 2
    assert "classify" in capsys.readouterr().err
    shutil.rmtree(out / "nullmodel")
    assert main(["report", "-o", str(out)]) == 2
    assert "nullmodel, classify" in capsys.readouterr().err


def test_tampered_and_stale_artifacts(corpus, done, tmp_path, capsys):
    out = tmp_path / "t"
    shutil.copytree(done, out)
    with open(out / "aggregate" / "aggregates.csv", "a") as fh:
        fh.write("\n")
    assert main(["correlate", "-o", str(out)]) == 2
    assert "aggregate" in capsys.readouterr().err

    out = tmp_path / "s"
    shutil.copytree(done, out)
    cfg = str(corpus.directory / "pipeline.toml")
    assert main(["ingest", "--config", cfg, "-o", str(out), "--min-rate", "0.8"]) == 0
    assert verify_chain(out) == ["measures"]
    assert main(["report", "-o", str(out)]) == 2
    assert "measures" in capsys.readouterr().err


def test_geometry_only_mapping(corpus, tmp_path):
    base = ["--config", str(corpus.directory / "pipeline.toml"), "-o", str(tmp_path / "g")]
    assert main(["ingest", *base]) == 0 and main(["measures", *base]) == 0
    assert main(["aggregate", *base, "--set", f'inputs.geometry="{corpus.geometry}"',
                 "--set", 'inputs.tower_regions=""']) == 3  # an empty path is not a file
    (tmp_path / "geo.toml").write_text(
        f'[inputs]\ntowers = "{corpus.towers}"\nregions = "{corpus.regions}"\ngeometry = "{corpus.geometry}"\n'
    )
    out = str(tmp_path / "g")
    assert main(["aggregate", "--config", str(tmp_path / "geo.toml"), "-o", out]) == 0
    summary = json.loads((tmp_path / "g" / "aggregate" / "summary.json").read_text())
    assert summary["towers_by_containment"] == summary["towers"] and summary["users_dropped"] == 0


def test_synth_command(tmp_path):
    args = ["synth", "--users", "300", "--regions", "6", "--seed", "2"]
    assert main(args + ["-o", str(tmp_path / "a")]) == 0
    assert main(args + ["-o", str(tmp_path / "b"), "--workers", "2"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert main(["synth", "-o", str(tmp_path / "n"), "--users", "300", "--regions", "6", "--seed", "2",
                 "--nulls"]) == 0
    truth = json.loads((tmp_path / "n" / "ground_truth.json").read_text())
    assert truth["plant"]["di_slope"] == 0
    assert main(["synth", "-o", str(tmp_path / "x"), "--seed", "2", "--users", "0"]) == 3
    cfg = load_config(tmp_path / "a" / "pipeline.toml")
    assert cfg.cdr == tmp_path / "a" / "cdr.csv" and cfg.start is not None
