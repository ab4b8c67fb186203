import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from wgs_auction.cli import main

DEMOS = Path(__file__).resolve().parent.parent / "demos" / "instances"


def run(*argv):
    return main([str(a) for a in argv])


def test_solve_exchange_certifies(capsys):
    assert run("solve-exchange", DEMOS / "mixed-exchange.json", "--eps", "0.05") == 0
    assert "certificate: PASS" in capsys.readouterr().out


def test_solve_sr_nonexistence_exit_3(capsys):
    assert run("solve-sr", DEMOS / "cobbdouglas-noeq.json", "--eps", "0.1") == 3
    assert "no SR-equilibrium within bound" in capsys.readouterr().out


def test_eps_out_of_range_is_usage_error(capsys):
    assert run("solve-exchange", DEMOS / "mixed-exchange.json", "--eps", "0.3") == 2
    assert "eps" in capsys.readouterr().err


def test_missing_file_and_bad_flag():
    assert run("solve-exchange", "/nonexistent.json") == 2
    assert run("solve-exchange") == 2
    assert run("solve-sr", DEMOS / "mixed-exchange.json") == 2


def test_reports_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run("solve-exchange", DEMOS / "ces-symmetric.json", "--eps", "0.05", "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()
    for out in (a, b):
        assert run("solve-nsw", DEMOS / "nsw-2x2.json", "--out", out) == 0
    assert a.read_bytes() == b.read_bytes()


def test_verify_roundtrip(tmp_path, capsys):
    rep = tmp_path / "rep.json"
    assert run("solve-sr", DEMOS / "fisher-caps.json", "--out", rep) == 0
    assert run("verify", DEMOS / "fisher-caps.json", rep) == 0
    obj = json.loads(rep.read_text())
    obj["prices"]["base"] = [2 * x for x in obj["prices"]["base"]]
    rep.write_text(json.dumps(obj))
    capsys.readouterr()
    assert run("verify", DEMOS / "fisher-caps.json", rep) == 1
    assert "FAIL" in capsys.readouterr().out


def test_verify_nsw_report(tmp_path):
    rep = tmp_path / "nsw.json"
    assert run("solve-nsw", DEMOS / "nsw-segments.json", "--out", rep, "--certify-bruteforce") == 0
    assert run("verify", DEMOS / "nsw-segments.json", rep) == 0


def test_trace_replays(tmp_path, capsys):
    trace = tmp_path / "trace.jsonl"
    assert run("solve-exchange", DEMOS / "mixed-exchange.json", "--trace", trace) == 0
    capsys.readouterr()
    assert run("replay", DEMOS / "mixed-exchange.json", trace) == 0
    assert "mismatches 0" in capsys.readouterr().out


def test_bench_empty_directory(tmp_path):
    out = tmp_path / "bench.csv"
    assert run("bench", tmp_path, "--out", out) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 1 and rows[0][0] == "instance"


def test_bench_rows(tmp_path):
    src = tmp_path / "inst"
    src.mkdir()
    for name in ("mixed-exchange.json", "ces-symmetric.json", "cobbdouglas-noeq.json"):
        shutil.copy(DEMOS / name, src / name)
    (src / "broken.json").write_text("{")
    out = tmp_path / "bench.csv"
    assert run("bench", src, "--eps", "0.25,0.1", "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 8
    assert sum(r["status"] == "error" for r in rows) == 2
    for r in rows:
        if r["status"] == "ok":
            assert int(r["max_rounds"]) <= int(r["round_cap"])


def test_properties(capsys):
    assert run("properties", "--family", "ces", "--trials", "200") == 0
    assert run("properties", "--family", "ces_broken", "--trials", "100") == 1
    assert run("properties", "--family", "nope") == 2


def test_oracles(capsys):
    assert run("oracle", "nsw-bruteforce", DEMOS / "nsw-2x2.json") == 0
    assert json.loads(capsys.readouterr().out)["opt"] == pytest.approx(2.0)
    assert run("oracle", "fisher", DEMOS / "fisher-caps.json") == 2


def test_dummy_flag(capsys):
    assert run("solve-exchange", DEMOS / "ces-symmetric.json", "--eps", "0.05", "--dummy-eta", "1") == 0
    assert run("solve-exchange", DEMOS / "mixed-exchange.json", "--eps", "0.25", "--dummy-eta", "1") == 2


def test_fnp_debug(tmp_path):
    out = tmp_path / "calls.jsonl"
    assert run("fnp-debug", DEMOS / "mixed-exchange.json", "--out", out) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert rows and all(not r["problems"] for r in rows)


def test_console_script():
    exe = shutil.which("wgs-auction")
    cmd = [exe] if exe else [sys.executable, "-m", "wgs_auction.cli"]
    proc = subprocess.run(cmd + ["solve-sr", str(DEMOS / "cobbdouglas-noeq.json")], capture_output=True, text=True)
    assert proc.returncode == 3
