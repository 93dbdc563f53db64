import datetime as dt

import pytest

from nowcast.ingest import CallRecords, CdrRecord, ObservationWindow, TowerTable

WINDOW = ObservationWindow(dt.date(2007, 9, 1), dt.date(2007, 10, 16))


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def towers_csv(tmp_path):
    return write_lines(
        tmp_path / "towers.csv",
        ["tower,latitude,longitude", "36,49.54,3.64", "37,48.28,1.258", "38,48.22,-1.52"],
    )


def make_records(rows, towers=None):
    """rows: (timestamp 'YYYY-MM-DD HH:MM', tower, caller, callee)."""
    if towers is None:
        ids = sorted({r[1] for r in rows}) or ["T"]
        towers = TowerTable(ids, [45.0 + 0.01 * i for i in range(len(ids))], [2.0] * len(ids))
    recs = [CdrRecord(dt.datetime.fromisoformat(ts), t, a, b) for ts, t, a, b in rows]
    return CallRecords.from_records(recs, towers), towers


def measure_corpus(corpus, window=None):
    """Ingest, measure and aggregate a generated corpus with library calls."""
    from nowcast.ingest import build_call_graph, build_trajectories, parse_cdr, retained_mask
    from nowcast.measures import compute_all_profiles
    from nowcast.territory import aggregate, assign_users, load_regions, load_tower_mapping, map_tower_to_region

    parsed = parse_cdr(corpus.cdr, corpus.towers, window)
    mask = retained_mask(parsed.records, parsed.window)
    profiles = compute_all_profiles(
        build_trajectories(parsed.records, mask), build_call_graph(parsed.records, mask), parsed.towers
    )
    regions = load_regions(corpus.regions)
    towers = map_tower_to_region(parsed.towers, regions, mapping=load_tower_mapping(corpus.tower_regions))
    assignment = assign_users(profiles, towers.regions)
    return profiles, assignment, aggregate(profiles, assignment), regions


# one line per acceptance criterion, printed again at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
