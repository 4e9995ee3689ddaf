from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from runlmc import cli
from runlmc.datamodel import PerformanceTable, read_table, write_table

DATA = Path(__file__).parent / "data"


def run_ok(argv, capsys):
    code = cli.run([str(a) for a in argv])
    out = capsys.readouterr()
    assert code == 0, out.err
    return out.out


def footer(stdout: str) -> dict:
    return json.loads(stdout.strip().splitlines()[-1])


def test_synth_reproduces_the_stored_table(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run_ok(["synth", "--n", 300, "--noise", 0.01, "--scheme", "uniform_k", "--k", 5, "--seed", 7,
            "--out", "synth_300.tsv"], capsys)
    assert (tmp_path / "synth_300.tsv").read_bytes() == (DATA / "synth_300.tsv").read_bytes()
    assert (tmp_path / "synth_300.json").read_bytes() == (DATA / "synth_300.json").read_bytes()


def test_compare_matches_golden_file(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(DATA)
    out = tmp_path / "cmp.tsv"
    stdout = run_ok(["compare", "--table", "synth_300.tsv", "--methods", "mean,riegel,purdy,lmc2",
                     "--holdouts", 1000, "--seed", 7, "--out", out], capsys)
    assert out.read_text() == (DATA / "compare_golden.tsv").read_text()
    meta = footer(stdout)
    assert meta["seed"] == 7 and meta["n_shared"] == 1000 and "elapsed_seconds" in meta


def test_compare_is_independent_of_threads(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(DATA)
    outs = []
    for threads in (1, 8):
        out = tmp_path / f"cmp{threads}.tsv"
        js = tmp_path / f"cmp{threads}.json"
        run_ok(["compare", "--table", "synth_300.tsv", "--methods", "knn,lmc3", "--holdouts", 200,
                "--seed", 3, "--threads", threads, "--out", out, "--json", js], capsys)
        outs.append((out.read_bytes(), js.read_bytes()))
    assert outs[0] == outs[1]


def test_riegel_prediction(tmp_path, capsys):
    v = np.full((1, 10), np.nan)
    v[0, 7] = 2400.0
    write_table(PerformanceTable(v), tmp_path / "one.tsv")
    stdout = run_ok(["predict", "--table", tmp_path / "one.tsv", "--method", "riegel", "--row", 0,
                     "--event", "marathon", "--param", "time"], capsys)
    row = stdout.splitlines()[-2].split("\t")
    assert row[:3] == ["0", "Marathon", "riegel"]
    assert float(row[3]) == pytest.approx(11041, abs=1)


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert cli.run(["teleport"]) == 1
    assert "usage" in capsys.readouterr().err.lower()
    assert cli.run([]) == 1


def test_missing_file_is_a_data_error(tmp_path, capsys):
    assert cli.run(["predict", "--table", str(tmp_path / "nope.tsv"), "--method", "mean", "--row", "0",
                    "--event", "100m"]) == 2
    assert "data error" in capsys.readouterr().err


def test_unknown_event_is_a_data_error(capsys):
    assert cli.run(["predict", "--table", str(DATA / "synth_300.tsv"), "--method", "mean", "--row", "0",
                    "--event", "javelin"]) == 2


def test_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 12, "noise": 0.0}))
    stdout = run_ok(["synth", "--n", 50, "--out", tmp_path / "s.tsv", "--config", cfg], capsys)
    assert footer(stdout)["rows"] == 12
    assert read_table(tmp_path / "s.tsv").n_athletes == 12


def test_pipeline_from_raw_files(tmp_path, capsys):
    ath = tmp_path / "athletes.csv"
    ev = tmp_path / "events.csv"
    ath.write_text("athlete_id,gender,birth_date\n" + "".join(f"{i},M,1990-01-01\n" for i in range(40)))
    rng = np.random.default_rng(0)
    lines = ["athlete_id,event,date,performance"]
    labels = ["100m", "200m", "400m", "800m", "1500m", "Mile", "5000m", "10000m", "HalfMarathon", "Marathon"]
    dists = [100, 200, 400, 800, 1500, 1609.344, 5000, 10000, 21097.5, 42195]
    for i in range(40):
        f = rng.uniform(0.95, 1.3)
        alpha = rng.uniform(1.08, 1.16)
        for e, d in zip(labels, dists):
            if rng.random() < 0.4:
                continue
            t = 12.0 * (d / 100) ** alpha
            lines.append(f"{i},{e},2015-0{rng.integers(1, 9)}-10,{t * f * rng.uniform(0.99, 1.01):.2f}")
    ev.write_text("\n".join(lines) + "\n")
    table = tmp_path / "t.tsv"
    run_ok(["ingest", "--athletes", ath, "--events", ev, "--out", table], capsys)
    imputed = tmp_path / "imp.tsv"
    run_ok(["impute", "--table", table, "--rank", 2, "--out", imputed], capsys)
    model = tmp_path / "model.json"
    run_ok(["components", "--table", imputed, "--rank", 2, "--out", model], capsys)
    assert json.loads(model.read_text())["components"]
    summary = run_ok(["summary", "--table", table], capsys)
    assert "preferred_distance" in summary
