"""Simulation harness CLI: scenario runs, topology, matrix, stress, report.

Report-path commands write the machine-readable artifact (JSON or
JSON-lines) and render a figure next to it.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path
from typing import Optional

import click

from . import report
from .errors import ScenarioFailed
from .registry import PERMISSION_MATRIX
from .scenarios import (
    STORY_TITLES,
    build_matrix_fixture,
    cross_session_leaks,
    run_scenario,
    run_stress,
)
from .topology import (
    ReachabilityChecker,
    build_default_topology,
    enumerate_access_matrix,
)


def _expected_matrix_path() -> Path:
    return Path(__file__).parent / "data" / "expected_matrix.json"


@click.group()
def main():
    """Replay the control plane's user stories over the zone topology."""


@main.command()
@click.option("--story", type=int, default=None, help="Story number (1-6).")
@click.option("--all", "run_all", is_flag=True, help="Run every story.")
@click.option("--out-dir", default=None, help="Write transcript JSON-lines here.")
def run(story: Optional[int], run_all: bool, out_dir: Optional[str]):
    """Run scenario scripts and print per-step outcomes."""
    if story is None and not run_all:
        raise click.UsageError("pass --story N or --all")
    stories = sorted(STORY_TITLES) if run_all else [story]
    failures = 0
    for story_id in stories:
        started = time.monotonic()
        try:
            transcript = run_scenario(story_id)
        except ScenarioFailed as err:
            click.echo(f"story {story_id}: FAIL ({err})")
            failures += 1
            continue
        elapsed = time.monotonic() - started
        click.echo(
            f"story {story_id}: PASS ({len(transcript.steps)} steps, "
            f"{elapsed:.2f}s) - {transcript.title}"
        )
        for step in transcript.steps:
            click.echo(
                f"  [{step.index}] {step.actor:<10} {step.operation:<20} "
                f"{step.actual}"
            )
        if out_dir:
            out_path = Path(out_dir)
            out_path.mkdir(parents=True, exist_ok=True)
            target = out_path / f"story-{story_id}.jsonl"
            with target.open("w", encoding="utf-8") as fh:
                for step in transcript.steps:
                    fh.write(json.dumps(step.to_json(), sort_keys=True) + "\n")
            click.echo(f"  transcript: {target}")
    if failures:
        sys.exit(1)


@main.command()
@click.option("--out", "out_path", default="matrix.json", show_default=True)
@click.option("--fig", "fig_path", default=None,
              help="Figure path (defaults next to --out).")
@click.option("--check/--no-check", default=True,
              help="Compare against the hand-derived expected table.")
def matrix(out_path: str, fig_path: Optional[str], check: bool):
    """Enumerate the access matrix and render it."""
    stack, principals = build_matrix_fixture()
    checker = ReachabilityChecker(stack.tokens, stack.ca.public_key)
    graph = build_default_topology()
    result = enumerate_access_matrix(
        graph, principals, checker, stack.clock.now()
    )
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    click.echo(f"matrix: {out}")
    fig = Path(fig_path) if fig_path else out.with_suffix(".png")
    report.draw_access_matrix(result, fig)
    click.echo(f"figure: {fig}")
    if check:
        expected = json.loads(_expected_matrix_path().read_text(encoding="utf-8"))
        actual_cells = {
            f"{r}|{c}": result.cells[(r, c)]
            for r in result.rows for c in result.columns
        }
        if actual_cells == expected["cells"]:
            click.echo("matrix equals the hand-derived expected table")
        else:
            diffs = {
                k: (expected["cells"].get(k), actual_cells.get(k))
                for k in set(expected["cells"]) | set(actual_cells)
                if expected["cells"].get(k) != actual_cells.get(k)
            }
            click.echo(f"MATRIX DIVERGES from expected table: {diffs}")
            sys.exit(1)


@main.command()
@click.option("--out", "out_path", default="topology.json", show_default=True)
@click.option("--fig", "fig_path", default=None)
def topology(out_path: str, fig_path: Optional[str]):
    """Write the zone graph and its map."""
    graph = build_default_topology()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(graph.to_json(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    click.echo(f"topology: {out}")
    fig = Path(fig_path) if fig_path else out.with_suffix(".png")
    report.draw_topology(graph, fig)
    click.echo(f"figure: {fig}")


@main.command()
@click.option("--sessions", default=45, show_default=True)
@click.option("--out", "out_path", default="stress.jsonl", show_default=True)
@click.option("--fig", "fig_path", default=None)
def stress(sessions: int, out_path: str, fig_path: Optional[str]):
    """Concurrent login/token/tunnel/spawn flows, one per session."""
    started = time.monotonic()
    results = run_stress(sessions)
    elapsed = time.monotonic() - started
    ok = sum(1 for r in results if r.ok)
    leaks = cross_session_leaks(results)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_json(), sort_keys=True) + "\n")
    click.echo(
        f"{ok}/{sessions} flows succeeded in {elapsed:.2f}s, "
        f"{len(leaks)} cross-session leaks"
    )
    click.echo(f"transcripts: {out}")
    fig = Path(fig_path) if fig_path else out.with_suffix(".png")
    report.draw_stress_timeline(results, fig)
    click.echo(f"figure: {fig}")
    if ok != sessions or leaks:
        sys.exit(1)


@main.command()
@click.option("--out", "out_path", default="role_actions.json", show_default=True)
def permissions(out_path: str):
    """Export the static role/action permission matrix."""
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(PERMISSION_MATRIX, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    click.echo(f"permissions: {out}")


@main.command(name="report")
@click.option("--out-dir", default="reports", show_default=True)
@click.option("--sessions", default=45, show_default=True)
@click.pass_context
def full_report(ctx: click.Context, out_dir: str, sessions: int):
    """Everything: stories, topology, matrix, permissions, stress."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx.invoke(run, story=None, run_all=True, out_dir=str(out / "transcripts"))
    ctx.invoke(topology, out_path=str(out / "topology.json"), fig_path=None)
    ctx.invoke(matrix, out_path=str(out / "matrix.json"), fig_path=None,
               check=True)
    ctx.invoke(permissions, out_path=str(out / "role_actions.json"))
    ctx.invoke(stress, sessions=sessions, out_path=str(out / "stress.jsonl"),
               fig_path=None)
    click.echo(f"report complete: {out}")


if __name__ == "__main__":
    main()
