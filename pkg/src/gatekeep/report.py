"""Figure rendering for harness reports.

Every report artifact pairs a machine-readable file (JSON or JSON-lines)
with a rendered figure next to it: the zone topology map, the access-matrix
heatmap, and the concurrency-drill timeline.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import FancyArrowPatch

from .scenarios import SessionFlowResult
from .topology import AccessMatrix, ZoneGraph

DOMAIN_COLORS = {
    "EXTERNAL": "#9e9e9e",
    "FDS": "#4e79a7",
    "SWS": "#f28e2b",
    "MDC": "#59a14f",
    "SEC": "#e15759",
}

ZONE_COLUMNS = {
    "internet": 0.0,
    "access": 1.0,
    "hpc": 2.0,
    "management": 2.0,
    "data": 3.0,
    "security": 3.0,
}


def _node_positions(graph: ZoneGraph) -> dict[str, tuple[float, float]]:
    columns: dict[float, list[str]] = {}
    for node in sorted(graph.nodes.values(), key=lambda n: (n.zone, n.node_id)):
        x = ZONE_COLUMNS.get(node.zone, 4.0)
        columns.setdefault(x, []).append(node.node_id)
    positions = {}
    for x, ids in columns.items():
        span = max(len(ids) - 1, 1)
        for i, node_id in enumerate(ids):
            y = 1.0 - (2.0 * i / span if len(ids) > 1 else 0.0)
            positions[node_id] = (x, y)
    return positions


def draw_topology(graph: ZoneGraph, path: str | Path) -> Path:
    """Zone map: nodes colored by domain, edges labeled by credential class."""
    positions = _node_positions(graph)
    fig, ax = plt.subplots(figsize=(11, 6))
    for edge in graph.edges:
        x1, y1 = positions[edge.src]
        x2, y2 = positions[edge.dst]
        arrow = FancyArrowPatch(
            (x1, y1), (x2, y2),
            arrowstyle="-|>", mutation_scale=12,
            color="#555555", lw=0.9, alpha=0.7,
            connectionstyle="arc3,rad=0.08",
            shrinkA=18, shrinkB=18,
        )
        ax.add_patch(arrow)
        label = edge.credential if edge.credential != "none" else "open"
        ax.annotate(
            label,
            ((x1 + x2) / 2, (y1 + y2) / 2 + 0.06),
            fontsize=5.5, color="#333333", ha="center",
        )
    for node_id, (x, y) in positions.items():
        node = graph.nodes[node_id]
        ax.scatter(
            [x], [y], s=1400,
            color=DOMAIN_COLORS.get(node.domain, "#cccccc"),
            edgecolors="black", linewidths=0.8, zorder=3,
        )
        ax.annotate(
            f"{node_id}\n[{node.domain}/{node.zone}]",
            (x, y), fontsize=6.5, ha="center", va="center", zorder=4,
        )
    ax.set_xlim(-0.5, 4.0)
    ax.set_ylim(-1.5, 1.5)
    ax.set_axis_off()
    ax.set_title("Credential-gated zone topology")
    handles = [
        plt.Line2D([], [], marker="o", linestyle="", color=color, label=domain)
        for domain, color in DOMAIN_COLORS.items()
    ]
    ax.legend(handles=handles, loc="lower right", fontsize=7)
    out = Path(path)
    fig.savefig(out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out


def draw_access_matrix(matrix: AccessMatrix, path: str | Path) -> Path:
    """Allow/deny heatmap over principals x targets."""
    data = [
        [1.0 if matrix.cells[(row, col)] == "allow" else 0.0
         for col in matrix.columns]
        for row in matrix.rows
    ]
    fig, ax = plt.subplots(
        figsize=(1.6 + 1.1 * len(matrix.columns), 1.2 + 0.5 * len(matrix.rows))
    )
    ax.imshow(data, cmap="RdYlGn", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(matrix.columns)))
    ax.set_xticklabels(matrix.columns, rotation=30, ha="right", fontsize=7)
    ax.set_yticks(range(len(matrix.rows)))
    ax.set_yticklabels(matrix.rows, fontsize=7)
    for i, row in enumerate(matrix.rows):
        for j, col in enumerate(matrix.columns):
            ax.annotate(
                matrix.cells[(row, col)], (j, i),
                ha="center", va="center", fontsize=6.5,
            )
    ax.set_title("Access matrix (brute-force reachability oracle)", fontsize=9)
    out = Path(path)
    fig.savefig(out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out


def draw_stress_timeline(
    results: list[SessionFlowResult], path: str | Path
) -> Path:
    """Per-session bars for the concurrent login/token/tunnel/spawn drill."""
    ordered = sorted(results, key=lambda r: r.user)
    fig, ax = plt.subplots(figsize=(8, 0.18 * max(len(ordered), 10) + 1.5))
    for i, result in enumerate(ordered):
        width = max(result.finished - result.started, 1e-4)
        ax.barh(
            i, width, left=result.started, height=0.7,
            color="#59a14f" if result.ok else "#e15759",
            edgecolor="black", linewidth=0.3,
        )
    ax.set_yticks(range(len(ordered)))
    ax.set_yticklabels([r.user for r in ordered], fontsize=5.5)
    ax.invert_yaxis()
    ax.set_xlabel("seconds since drill start")
    ok = sum(1 for r in results if r.ok)
    ax.set_title(
        f"Concurrent session drill: {ok}/{len(results)} flows succeeded",
        fontsize=9,
    )
    out = Path(path)
    fig.savefig(out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out
