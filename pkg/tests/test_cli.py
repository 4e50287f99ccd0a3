import json
import subprocess
import sys
from pathlib import Path

import pytest

from cbfpa import cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SWEEP = """\
kind: illustrative_sweep
name: {name}
grid:
  method: [{method}]
  w: [0.1, 1.0]
  gamma_h: [10.0]
  alpha: [0.001]
flow:
  steps: 200
"""


def _diags(err):
    return [json.loads(line) for line in err.strip().splitlines()]


def test_validate_ok_prints_canonical(capsys):
    assert cli.main(["validate", str(CONFIGS / "illustrative_w_sweep.yaml")]) == 0
    out = capsys.readouterr().out
    assert "kind: illustrative_sweep" in out


def test_validate_reports_json_with_lines(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SWEEP.format(name="x", method="cbfpa").replace("w: [0.1, 1.0]", "w: [0.1, -2]") + "extra: 1\n")
    assert cli.main(["validate", str(bad)]) == cli.EXIT_CONFIG
    diags = _diags(capsys.readouterr().err)
    by_field = {d["field"]: d for d in diags}
    assert by_field["grid.w[1]"]["line"] == 5
    assert by_field["extra"]["line"] == 10
    assert all(d["source"] == str(bad) for d in diags)


def test_validate_missing_file(capsys, tmp_path):
    assert cli.main(["validate", str(tmp_path / "nope.yaml")]) == cli.EXIT_CONFIG
    assert _diags(capsys.readouterr().err)[0]["field"] == "<file>"


def test_run_and_compare(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CBFPA_OUTPUT_DIR", str(tmp_path / "out"))
    for m in ("cbfpa", "mogd"):
        p = tmp_path / f"{m}.yaml"
        p.write_text(SWEEP.format(name=m, method=m))
        assert cli.main(["run", str(p)]) == 0
    dirs = [str(tmp_path / "out" / m) for m in ("cbfpa", "mogd")]
    capsys.readouterr()
    assert cli.main(["compare", *dirs]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("w,gamma_h,alpha,cbfpa_final_J") and len(lines) == 3
    table = tmp_path / "cmp.csv"
    assert cli.main(["compare", *dirs, "--out", str(table)]) == 0
    assert table.read_text().splitlines() == lines


def test_run_out_flag_overrides_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CBFPA_OUTPUT_DIR", str(tmp_path / "env"))
    p = tmp_path / "c.yaml"
    p.write_text(SWEEP.format(name="c", method="gd"))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "aggregate.csv").exists()
    assert not (tmp_path / "env").exists()


def test_compare_mismatched_grids(tmp_path, capsys):
    a = tmp_path / "a.yaml"
    a.write_text(SWEEP.format(name="a", method="cbfpa"))
    b = tmp_path / "b.yaml"
    b.write_text(SWEEP.format(name="b", method="mogd").replace("w: [0.1, 1.0]", "w: [0.5]"))
    for p in (a, b):
        cli.main(["run", str(p), "--out", str(tmp_path / p.stem)])
    capsys.readouterr()
    assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == cli.EXIT_FAILED
    assert "grid mismatch" in _diags(capsys.readouterr().err)[0]["error"]


def test_compare_missing_dir(tmp_path, capsys):
    assert cli.main(["compare", str(tmp_path)]) == cli.EXIT_CONFIG


def test_fuzz_oracle(capsys):
    assert cli.main(["fuzz-oracle", "--instances", "500", "--seed", "3"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["ok"] and rep["instances"] == 500 and rep["branch_counts"]["HARD_ACTIVE"] == 0


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cbfpa", "validate", str(tmp_path / "none.yaml")],
                       capture_output=True, text=True)
    assert r.returncode == 2 and json.loads(r.stderr)["field"] == "<file>"


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2
