# Copyright (C) 2026 The roundattn Authors
# SPDX-License-Identifier: Apache-2.0

import json
import math
import os
import pathlib
import subprocess

import jsonschema
import pytest

import roundattn

SCHEMAS = pathlib.Path(os.environ.get("ROUNDATTN_SCHEMAS", pathlib.Path(__file__).parents[2] / "schemas"))
DATA = pathlib.Path(os.environ.get("ROUNDATTN_TEST_DATA", pathlib.Path(__file__).parents[1] / "data"))
CLI = os.environ.get("ROUNDATTN_CLI")
CONV = str(DATA / "three_rounds.json")


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def test_memory_ratio_examples():
    assert roundattn.memory_ratio(28, 5, 0, 1) == pytest.approx(5 / 28, abs=1e-12)
    assert roundattn.memory_ratio(24, 11, 2, 10) == pytest.approx(136 / 240, abs=1e-12)
    assert roundattn.save_percent(80, 18, 0, 1) == 78
    f = roundattn.footprint_report(1, 1024, 896, 24, 11, 0, 1)
    assert f["original_bytes"] == 88080384


def test_reference_rows_reproduce():
    rows = roundattn.reference_rows()
    assert len(rows) == 10
    for r in rows:
        assert roundattn.save_percent(r["layers"], r["watershed"], 0, 1) == r["save_percent"]


def test_kl_and_selection():
    assert roundattn.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-6)
    assert sum(roundattn.normalize([0.0, 3.0, 1.0])) == pytest.approx(1.0)
    assert roundattn.select([0.5, 0.3, 0.15, 0.05], "fixed", v=0.2) == [0, 1]
    assert roundattn.select([0.1] * 10, "top", fraction=0.3) == [0, 1, 2]


def test_errors_map_to_python_exceptions():
    with pytest.raises(roundattn.InputError):
        roundattn.memory_ratio(24, 24, 0, 1)
    with pytest.raises(RuntimeError):
        roundattn.report("run", "--conversation", str(DATA / "malformed.json"), "--lw", "3")


def test_memory_report_schema():
    jsonschema.validate(roundattn.report("memory", "--model-layers", "36", "--lw", "12"), schema("memory"))


def test_run_report_schema_and_invariant():
    r = roundattn.report("run", "--conversation", CONV, "--lw", "3", "--max-decode", "6")
    jsonschema.validate(r, schema("run"))
    for t in r["turns"]:
        m = t["metrics"]
        if m["has_history"]:
            assert m["selection_invocations"] == 1
            assert m["upper_h2d_events"] == 1


def test_compare_report_schema():
    r = roundattn.report("compare", "--conversation", CONV, "--lw", "3", "--max-decode", "6", "--policies",
                         "baseline,all,top,token")
    jsonschema.validate(r, schema("compare"))
    assert [row["divergence_tokens"] for row in r["rows"][:2]] == [0, 0]


def test_analyze_report_schema():
    r = roundattn.report("analyze", str(DATA / "corpus"))
    jsonschema.validate(r, schema("analyze"))
    assert 1 <= r["watershed"]["layer"] < r["model"]["layers"]


@pytest.mark.skipif(CLI is None, reason="command-line binary not configured")
def test_binary_matches_module(tmp_path):
    args = ["run", "--conversation", CONV, "--lw", "3", "--max-decode", "5"]
    proc = subprocess.run([CLI, *args, "--out", str(tmp_path)], capture_output=True, text=True, check=True)
    code, out, _ = roundattn.run_command(args)
    assert code == 0
    assert proc.stdout == out
    assert json.loads((tmp_path / "report.json").read_text()) == json.loads(out)
    assert (tmp_path / "cost_curves.csv").exists()


@pytest.mark.skipif(CLI is None, reason="command-line binary not configured")
def test_binary_exit_codes():
    assert subprocess.run([CLI, "run", "--conversation", str(DATA / "missing.json"), "--lw", "3"],
                          capture_output=True).returncode == 2
    assert subprocess.run([CLI, "bogus"], capture_output=True).returncode == 2
