import json
from pathlib import Path

import pytest

from ecoroute.cli import main

PIPELINE = [
    ["synth", "--rows", "5", "--cols", "5", "--trips-per-link", "110", "--seed", "7", "--od-pairs", "3", "--out", "data"],
    ["ingest", "--trips", "data/traversals.csv", "--links", "data/links.csv", "--out", "ing"],
    ["fit", "--trips", "data/traversals.csv", "--links", "data/links.csv", "--out", "model.json", "--seed", "7",
     "--min-duration", "0", "--min-distance", "0"],
    ["fit-benchmarks", "--trips", "data/traversals.csv", "--links", "data/links.csv", "--out", "bench.json",
     "--min-duration", "0", "--min-distance", "0"],
    ["cluster-od", "--trips", "data/traversals.csv", "--links", "data/links.csv", "--out", "od_pairs.csv",
     "--min-duration", "0", "--min-distance", "0"],
    ["route", "--model", "model.json", "--net", "data", "--od", "od_pairs.csv", "--speeds", "ing/speeds.csv",
     "--out", "routes.jsonl"],
    ["report", "--routes", "routes.jsonl", "--out", "rep"],
    ["eval", "--trips", "data/traversals.csv", "--links", "data/links.csv", "--model", "model.json",
     "--benchmarks", "bench.json", "--out", "eval.json", "--min-duration", "0", "--min-distance", "0"],
]


def run_pipeline(workdir: Path, monkeypatch) -> dict[str, bytes]:
    """Run every subcommand in ``workdir``; return {relative path: bytes}."""
    workdir.mkdir(parents=True, exist_ok=True)
    monkeypatch.chdir(workdir)
    for argv in PIPELINE:
        assert main(["--threads", "2", *argv]) == 0, argv
    return {str(p.relative_to(workdir)): p.read_bytes() for p in sorted(workdir.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    try:
        root = tmp_path_factory.mktemp("cli")
        first = run_pipeline(root / "run", mp)
        second = run_pipeline(root / "run2", mp)
    finally:
        mp.undo()
    return root, first, second


@pytest.mark.slow
def test_pipeline_outputs(pipeline_runs):
    root, files, _ = pipeline_runs
    for name in ("data/links.csv", "ing/speeds.csv", "model.json", "od_pairs.csv", "routes.jsonl",
                 "rep/strategies.json", "rep/strategies.csv", "eval.json", "model.json.manifest.json"):
        assert name in files, name
    od_lines = files["od_pairs.csv"].decode().splitlines()
    assert len(od_lines) == 1 + 3
    routes = [json.loads(l) for l in files["routes.jsonl"].decode().splitlines()]
    assert len(routes) == 3 * 4
    report = json.loads(files["rep/strategies.json"])
    assert report["n_od"] == 3
    assert report["expected"]["eco"]["norm_fuel"] == 1.0
    assert report["expected"]["fastest"]["norm_time"] == 1.0
    ev = json.loads(files["eval.json"])
    assert set(ev["models"]) == {"gmr", "average_speed", "power_balance"}


@pytest.mark.slow
def test_pipeline_is_byte_identical(pipeline_runs):
    _, a, b = pipeline_runs
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


@pytest.mark.slow
def test_replay_reproduces(pipeline_runs, tmp_path, monkeypatch):
    root, files, _ = pipeline_runs
    monkeypatch.chdir(root / "run")
    before = (root / "run" / "od_pairs.csv").read_bytes()
    (root / "run" / "od_pairs.csv").unlink()
    assert main(["--replay", "od_pairs.csv.manifest.json"]) == 0
    assert (root / "run" / "od_pairs.csv").read_bytes() == before
    manifest = json.loads(files["od_pairs.csv.manifest.json"])
    assert manifest["parameters"]["min_pts"] == 10
    assert len(manifest["inputs"]) == 3 and all(len(d) == 64 for d in manifest["inputs"].values())


def test_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["ingest", "--trips", "nope.csv", "--links", "nope.csv", "--out", "x"]) == 2
    assert main(["synth", "--rows", "2", "--cols", "2", "--trips-per-link", "1", "--seed", "0",
                 "--congestion-low", "0.9", "--congestion-high", "0.1", "--out", "d"]) == 1
    assert main(["synth", "--rows", "0", "--cols", "2", "--trips-per-link", "1", "--seed", "0", "--out", "d"]) == 1


def test_parse_error_names_line(tmp_path, monkeypatch, caplog):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "--rows", "2", "--cols", "2", "--trips-per-link", "1", "--seed", "0", "--out", "d"]) == 0
    lines = Path("d/links.csv").read_text().splitlines()
    lines[2] = lines[2].split(",")[0] + ",oops"
    Path("d/links.csv").write_text("\n".join(lines) + "\n")
    assert main(["ingest", "--trips", "d/traversals.csv", "--links", "d/links.csv", "--out", "x"]) == 1
    assert "links.csv:3" in caplog.text
