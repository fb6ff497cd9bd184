import json
import math
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from lorentzgas.cli import dispatch, dump_csv, dump_json, fmt_float, rerun


def _only_run(root: Path, cmd: str) -> Path:
    runs = sorted((root / cmd).iterdir())
    assert len(runs) == 1
    return runs[0]


@given(st.floats(allow_nan=False))
def test_float_round_trip(x):
    assert float(fmt_float(x)) == x
    assert json.loads(dump_json({"x": x}))["x"] == x


def test_json_keeps_float_type():
    assert isinstance(json.loads(dump_json([1e6]))[0], float)


def test_csv_writer():
    text = dump_csv([{"a": 1, "b": 0.1}, {"a": 2, "b": 1 / 3}])
    lines = text.splitlines()
    assert lines[0] == "a,b" and float(lines[2].split(",")[1]) == 1 / 3


def test_argument_error_exit_code(capsys):
    assert dispatch(["nonsense"]) == 2
    assert dispatch(["lyapunov", "--steps", "many"]) == 2


def test_domain_error_exit_code(tmp_path, capsys):
    assert dispatch(["table", "--r", "0.5", "--out", str(tmp_path)]) == 1
    assert "r < 1/2" in capsys.readouterr().err


def test_construction_error_names_condition(tmp_path, capsys):
    code = dispatch(["chain", "mu2", "build", "--c", "2", "--n-star", "1", "--out", str(tmp_path)])
    assert code == 1
    assert "support" in capsys.readouterr().err


def test_lyapunov_output(tmp_path):
    assert dispatch(["lyapunov", "--r", "0.25", "--steps", "100000", "--seed", "7", "--out", str(tmp_path)]) == 0
    d = _only_run(tmp_path, "lyapunov")
    doc = json.loads((d / "lyapunov.json").read_text())
    assert {"lambda_plus", "std_error", "escape_count"} <= set(doc)
    man = json.loads((d / "manifest.json").read_text())
    assert man["params"]["seed"] == 7 and man["params"]["r"] == 0.25
    assert set(man["outputs"]) == {"lyapunov.json"}


def test_mu1_entropy_message(tmp_path, capsys):
    assert dispatch(["chain", "mu1", "entropy", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "h <= ln 2: PASS" in out
    h = float(out.split("h = ")[1].split()[0])
    assert abs(h - (math.log(3) - 2 / 3 * math.log(2))) < 1e-12


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 7, "r": 0.3}))
    assert dispatch(["orbit", "--config", str(cfg), "--r", "0.2", "--out", str(tmp_path)]) == 0
    man = json.loads((_only_run(tmp_path, "orbit") / "manifest.json").read_text())
    assert man["params"]["steps"] == 7 and man["params"]["r"] == 0.2


def test_rerun_bit_identical_across_threads(tmp_path, capsys):
    assert dispatch(["invariance", "--samples", "40000", "--threads", "1", "--out", str(tmp_path)]) == 0
    d = _only_run(tmp_path, "invariance")
    ok, new, match = rerun(str(d / "manifest.json"), threads=4)
    assert ok and all(match.values())
    assert (new / "invariance.json").read_bytes() == (d / "invariance.json").read_bytes()
    assert dispatch(["rerun", str(d / "manifest.json"), "--threads", "2"]) == 0


def test_rerun_detects_tampering(tmp_path, capsys):
    assert dispatch(["table", "--out", str(tmp_path)]) == 0
    m = _only_run(tmp_path, "table") / "manifest.json"
    doc = json.loads(m.read_text())
    doc["outputs"]["table.json"] = "0" * 64
    m.write_text(json.dumps(doc))
    assert dispatch(["rerun", str(m)]) == 1


def test_cells_scan_outputs(tmp_path):
    assert dispatch(["cells", "scan", "--n-max", "6", "--out", str(tmp_path)]) == 0
    d = _only_run(tmp_path, "cells-scan")
    hdr = json.loads((d / "raster.json").read_text())
    assert (d / "raster.bin").stat().st_size == 8 * hdr["resolution"][0] * hdr["resolution"][1]
    assert (d / "cells.csv").read_text().startswith("n,")
