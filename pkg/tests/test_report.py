"""Harness CLI report paths: delimited artifacts with figures alongside."""

from __future__ import annotations

import json
from pathlib import Path

from click.testing import CliRunner

from gatekeep import report
from gatekeep.harness_cli import main as harness_main
from gatekeep.scenarios import build_matrix_fixture, run_stress
from gatekeep.topology import (
    ReachabilityChecker,
    build_default_topology,
    enumerate_access_matrix,
)


def test_draw_topology_writes_png(tmp_path):
    path = report.draw_topology(build_default_topology(), tmp_path / "topo.png")
    assert path.exists()
    assert path.stat().st_size > 10_000
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_draw_matrix_writes_png(tmp_path):
    stack, principals = build_matrix_fixture()
    checker = ReachabilityChecker(stack.tokens, stack.ca.public_key)
    matrix = enumerate_access_matrix(
        build_default_topology(), principals, checker, stack.clock.now()
    )
    path = report.draw_access_matrix(matrix, tmp_path / "matrix.png")
    assert path.exists()
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_draw_stress_timeline_writes_png(tmp_path):
    results = run_stress(8)
    path = report.draw_stress_timeline(results, tmp_path / "stress.png")
    assert path.exists()
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_harness_run_single_story(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        harness_main,
        ["run", "--story", "3", "--out-dir", str(tmp_path)],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert "story 3: PASS" in result.output
    transcript = tmp_path / "story-3.jsonl"
    lines = [json.loads(l) for l in transcript.read_text().splitlines()]
    assert all(line["ok"] for line in lines)
    assert any(line["expected"] == "forbidden" for line in lines)


def test_harness_matrix_writes_json_and_figure(tmp_path):
    runner = CliRunner()
    out = tmp_path / "matrix.json"
    result = runner.invoke(
        harness_main, ["matrix", "--out", str(out)], catch_exceptions=False
    )
    assert result.exit_code == 0, result.output
    assert "hand-derived expected table" in result.output
    payload = json.loads(out.read_text())
    assert payload["rows"] == ["anonymous", "researcher", "pi", "admin"]
    assert (tmp_path / "matrix.png").exists()


def test_harness_topology_writes_json_and_figure(tmp_path):
    runner = CliRunner()
    out = tmp_path / "topology.json"
    result = runner.invoke(
        harness_main, ["topology", "--out", str(out)], catch_exceptions=False
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(out.read_text())
    assert {n["id"] for n in payload["nodes"]} >= {
        "internet", "bastion", "fds-login", "mgmt-node", "sec-ingest",
    }
    assert (tmp_path / "topology.png").exists()


def test_harness_stress_writes_jsonl_and_figure(tmp_path):
    runner = CliRunner()
    out = tmp_path / "stress.jsonl"
    result = runner.invoke(
        harness_main,
        ["stress", "--sessions", "10", "--out", str(out)],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert "10/10 flows succeeded" in result.output
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(lines) == 10
    assert all(line["ok"] for line in lines)
    assert (tmp_path / "stress.png").exists()


def test_harness_permissions_export(tmp_path):
    from gatekeep.registry import PERMISSION_MATRIX

    runner = CliRunner()
    out = tmp_path / "role_actions.json"
    result = runner.invoke(
        harness_main, ["permissions", "--out", str(out)], catch_exceptions=False
    )
    assert result.exit_code == 0
    assert json.loads(out.read_text()) == PERMISSION_MATRIX


def test_checked_in_frontend_fixture_matches_live_matrix():
    """The portal's checked-in role/action fixture must never drift from the
    registry's live permission matrix."""
    from gatekeep.registry import PERMISSION_MATRIX

    fixture = (
        Path(__file__).parents[1] / "frontend" / "fixtures" / "role_actions.json"
    )
    assert fixture.exists(), "frontend fixture missing"
    assert json.loads(fixture.read_text(encoding="utf-8")) == PERMISSION_MATRIX
