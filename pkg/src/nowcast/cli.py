"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ._io import atomic_write, sha256_file, write_json
from ._parallel import default_workers
from .config import config_hash, load_config, read_toml, tomllib
from .errors import PipelineError, ValidationError
from .pipeline import STAGES, run_pipeline, run_stage
from .synthgen import GeneratorConfig, generate_corpus, generate_nulls_benchmark

log = logging.getLogger("nowcast")

# flag -> dotted configuration key
FLAGS = {
    "output": "run.output",
    "seed": "run.seed",
    "workers": "run.workers",
    "cdr": "inputs.cdr",
    "towers": "inputs.towers",
    "regions": "inputs.regions",
    "tower_regions": "inputs.tower_regions",
    "geometry": "inputs.geometry",
    "start": "observation.start",
    "end": "observation.end",
    "min_rate": "filter.min_rate",
    "population_floor": "territory.population_floor",
    "min_users": "territory.min_users",
    "cutoff_km": "territory.cutoff_km",
    "nm_repetitions": "nullmodel.repetitions",
    "cv_repetitions": "regression.cv_repetitions",
    "trees": "classify.trees",
}

SYNTH_FLAGS = ("users", "regions", "towers_per_region", "days", "start", "di_slope", "di_noise", "pci_slope",
               "pci_noise", "seed")

DESCRIPTIONS = {
    "ingest": "parse the CDR and tower files, filter users, build trajectories and the call graph",
    "measures": "compute social and mobility volume and diversity per user",
    "aggregate": "assign users to regions by home tower and average their measures",
    "correlate": "correlate regional measures with indicators; decile tables",
    "nullmodel": "correlations under user (NM1) and indicator (NM2) shuffles",
    "regress": "linear models M1/M2 with LMG shares and cross-validation",
    "classify": "random-forest tertile classifiers C1/C2",
    "report": "consolidate every stage into one bundle",
    "pipeline": "run every stage in order",
}


def _value(text: str):
    """A ``--set`` value: TOML syntax when it parses, else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _pairs(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = _value(value.strip())
    return out


def _stage_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("--output", "-o", help="output directory (run.output)")
    p.add_argument("--seed", type=int, help="master seed; required by randomized stages")
    p.add_argument("--workers", type=int, help="worker cap (default: $NOWCAST_WORKERS or 1)")
    for name in ("cdr", "towers", "regions", "tower-regions", "geometry"):
        p.add_argument(f"--{name}", help=f"input file ({FLAGS[name.replace('-', '_')]})")
    p.add_argument("--start", help="observation window start, YYYY-MM-DD")
    p.add_argument("--end", help="observation window end (exclusive), YYYY-MM-DD")
    p.add_argument("--min-rate", type=float, help="activity filter: calls per day must exceed this")
    p.add_argument("--population-floor", type=float)
    p.add_argument("--min-users", type=int)
    p.add_argument("--cutoff-km", type=float)
    p.add_argument("--nm-repetitions", type=int)
    p.add_argument("--cv-repetitions", type=int)
    p.add_argument("--trees", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any configuration key, e.g. classify.min_leaf=5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nowcast", description="Nowcast regional indicators from call records.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES + ("pipeline",):
        _stage_options(sub.add_parser(stage, help=DESCRIPTIONS[stage], description=DESCRIPTIONS[stage]))

    s = sub.add_parser("synth", help="generate a synthetic corpus with planted relationships")
    s.add_argument("--output", "-o", required=True, type=Path, help="corpus directory")
    s.add_argument("--seed", type=int, help="master seed (required)")
    s.add_argument("--config", type=Path, help="TOML file; settings under [synth]")
    s.add_argument("--workers", type=int)
    s.add_argument("--nulls", action="store_true", help="no planted effect: indicators independent of measures")
    s.add_argument("--users", type=int)
    s.add_argument("--regions", type=int)
    s.add_argument("--towers-per-region", type=int)
    s.add_argument("--days", type=int)
    s.add_argument("--start", help="YYYY-MM-DD")
    s.add_argument("--di-slope", type=float)
    s.add_argument("--di-noise", type=float)
    s.add_argument("--pci-slope", type=float)
    s.add_argument("--pci-noise", type=float)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="any generator setting, e.g. max_contacts=6")
    return parser


def config_from_args(args: argparse.Namespace):
    overrides = {key: getattr(args, flag) for flag, key in FLAGS.items() if getattr(args, flag, None) is not None}
    overrides.update(_pairs(args.set))
    return load_config(args.config, overrides)


def _pipeline_toml(cfg: GeneratorConfig) -> str:
    window = cfg.window
    return (
        "[inputs]\n"
        'cdr = "cdr.csv"\n'
        'towers = "towers.csv"\n'
        'regions = "regions.csv"\n'
        'tower_regions = "tower_regions.csv"\n'
        'geometry = "regions.geojson"\n\n'
        "[observation]\n"
        f'start = "{window.start.isoformat()}"\n'
        f'end = "{window.end.isoformat()}"\n\n'
        "[filter]\n"
        f"min_rate = {cfg.min_rate!r}\n"
    )


def run_synth(args: argparse.Namespace) -> int:
    settings = {}
    if args.config is not None:
        settings.update(read_toml(args.config).get("synth", {}))
    for name in SYNTH_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            settings[name] = v
    settings.update(_pairs(args.set))
    if "seed" not in settings:
        raise ValidationError("synth is randomized and needs an explicit --seed")
    workers = args.workers if args.workers is not None else default_workers()
    try:
        cfg = GeneratorConfig.from_dict(settings)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid generator settings: {exc}") from None
    make = generate_nulls_benchmark if args.nulls else generate_corpus
    corpus = make(cfg, args.output, workers=workers)
    toml_path = Path(args.output) / "pipeline.toml"
    with atomic_write(toml_path) as fh:
        fh.write(_pipeline_toml(cfg).encode("utf-8"))
    files = [corpus.cdr, corpus.towers, corpus.regions, corpus.tower_regions, corpus.geometry,
             corpus.ground_truth, toml_path]
    write_json(Path(args.output) / "manifest.json", {
        "stage": "synth",
        "config_hash": config_hash(cfg.as_dict()),
        "settings": cfg.as_dict(),
        "nulls": bool(args.nulls),
        "outputs": {p.name: {"sha256": sha256_file(p)} for p in files},
        "records": corpus.records,
    })
    print(f"wrote {corpus.records} call records to {args.output}; run with --config {toml_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return run_synth(args)
        cfg = config_from_args(args)
        if args.command == "pipeline":
            run_pipeline(cfg)
        else:
            run_stage(args.command, cfg)
    except PipelineError as exc:
        print(f"nowcast {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"nowcast {args.command}: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
