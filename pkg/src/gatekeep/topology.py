"""Segmented zone topology and credential-gated reachability.

The graph mirrors the deployed four-domain layout: only access-zone
endpoints face the internet, login nodes sit behind the bastion, web
backends behind authenticated tunnels, and the management plane behind a
separate admin-only ingress. Edges carry credential classes; traversal is
decided by live validation calls into the token service and certificate
verifier, never by string matching.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import GatekeepError, UnknownTarget
from .sshca import verify_certificate

DOMAINS = ("MDC", "SWS", "FDS", "SEC", "EXTERNAL")
ZONES = ("access", "management", "hpc", "data", "security", "internet")

CRED_NONE = "none"
CRED_SSH_CERT = "ssh-certificate"
# Token-gated edges carry "user-token:<audience>" or "admin-token:<audience>".

# The six service targets the hand-derived matrix covers. Transit nodes
# (the bastion itself, the tailnet ingress) are not terminal targets: being
# able to knock on port 22 grants nothing.
MATRIX_TARGETS = (
    "fds-login",
    "login-aip1",
    "jupyter-backend",
    "mgmt-node",
    "sec-ingest",
    "data-store",
)


@dataclass(frozen=True)
class ZoneNode:
    node_id: str
    domain: str
    zone: str

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise ValueError(f"bad domain {self.domain!r}")
        if self.zone not in ZONES:
            raise ValueError(f"bad zone {self.zone!r}")


@dataclass(frozen=True)
class ZoneEdge:
    src: str
    dst: str
    credential: str
    tag: str = ""                     # "public-ingress" on open edges

    def __post_init__(self) -> None:
        if self.credential == CRED_NONE and self.tag != "public-ingress":
            raise ValueError("open edges must be tagged public-ingress")


@dataclass
class ZoneGraph:
    nodes: dict[str, ZoneNode] = field(default_factory=dict)
    edges: list[ZoneEdge] = field(default_factory=list)

    def add_node(self, node_id: str, domain: str, zone: str) -> None:
        self.nodes[node_id] = ZoneNode(node_id, domain, zone)

    def add_edge(self, src: str, dst: str, credential: str, tag: str = "") -> None:
        if src not in self.nodes or dst not in self.nodes:
            raise ValueError(f"edge endpoints must exist: {src}->{dst}")
        self.edges.append(ZoneEdge(src, dst, credential, tag))

    def out_edges(self, node_id: str) -> list[ZoneEdge]:
        return [e for e in self.edges if e.src == node_id]

    def to_json(self) -> dict[str, Any]:
        return {
            "nodes": [
                {"id": n.node_id, "domain": n.domain, "zone": n.zone}
                for n in sorted(self.nodes.values(), key=lambda n: n.node_id)
            ],
            "edges": [
                {
                    "src": e.src, "dst": e.dst,
                    "credential": e.credential,
                    **({"tag": e.tag} if e.tag else {}),
                }
                for e in sorted(
                    self.edges, key=lambda e: (e.src, e.dst, e.credential)
                )
            ],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ZoneGraph":
        graph = cls()
        for node in data["nodes"]:
            graph.add_node(node["id"], node["domain"], node["zone"])
        for edge in data["edges"]:
            graph.add_edge(
                edge["src"], edge["dst"], edge["credential"], edge.get("tag", "")
            )
        return graph


def build_default_topology() -> ZoneGraph:
    """The desk-scale rendering of the deployed four-domain layout."""
    g = ZoneGraph()
    g.add_node("internet", "EXTERNAL", "internet")
    g.add_node("fds-login", "FDS", "access")
    g.add_node("bastion", "SWS", "access")
    g.add_node("mgmt-tailnet", "SWS", "access")
    g.add_node("login-aip1", "MDC", "hpc")
    g.add_node("login-i3", "MDC", "hpc")
    g.add_node("jupyter-backend", "MDC", "hpc")
    g.add_node("mgmt-node", "MDC", "management")
    g.add_node("data-store", "MDC", "data")
    g.add_node("sec-ingest", "SEC", "security")

    # Public ingress: only access-zone endpoints face the internet, and the
    # bastion's open port still demands a certificate to traverse onward.
    g.add_edge("internet", "fds-login", CRED_NONE, tag="public-ingress")
    g.add_edge("internet", "bastion", CRED_NONE, tag="public-ingress")

    # User plane.
    g.add_edge("bastion", "login-aip1", CRED_SSH_CERT)
    g.add_edge("bastion", "login-i3", CRED_SSH_CERT)
    g.add_edge("fds-login", "jupyter-backend", "user-token:tunnel:jupyter")

    # Management plane: admin tokens only, no path from the user plane.
    g.add_edge("internet", "mgmt-tailnet", "admin-token:mgmt:tailnet")
    g.add_edge("mgmt-tailnet", "mgmt-node", "admin-token:mgmt:tailnet")
    g.add_edge("mgmt-node", "data-store", "admin-token:mgmt:tailnet")

    # Log forwarding: every service pushes to the SEC ingest with a
    # service-plane token no user principal ever holds.
    for src in ("fds-login", "bastion", "mgmt-tailnet", "login-aip1",
                "login-i3", "jupyter-backend", "mgmt-node"):
        g.add_edge(src, "sec-ingest", "user-token:siem:ingest")
    return g


def default_topology_fixture_path() -> Path:
    return Path(__file__).parent / "data" / "topology.json"


@dataclass
class PrincipalFixture:
    name: str
    tokens: list[str] = field(default_factory=list)
    certificates: list[tuple[bytes, str]] = field(default_factory=list)
    start_node: str = "internet"


@dataclass(frozen=True)
class ReachabilityResult:
    allowed: bool
    path: tuple[str, ...] = ()

    @property
    def verdict(self) -> str:
        return "allow" if self.allowed else "deny"


class ReachabilityChecker:
    """Evaluates paths against live validators, with per-query memoization
    so one query never validates the same credential twice per edge class."""

    def __init__(self, tokens, ca_public_key):
        self.tokens = tokens
        self.ca_public_key = ca_public_key

    def edge_satisfied(
        self,
        edge: ZoneEdge,
        principal: PrincipalFixture,
        now: float,
        cache: dict[str, bool],
    ) -> bool:
        cred = edge.credential
        if cred == CRED_NONE:
            return True
        if cred in cache:
            return cache[cred]
        ok = False
        if cred == CRED_SSH_CERT:
            for blob, presented in principal.certificates:
                verdict = verify_certificate(
                    blob, presented, now, self.ca_public_key
                )
                if verdict.accepted:
                    ok = True
                    break
        elif cred.startswith(("user-token:", "admin-token:")):
            audience = cred.split(":", 1)[1]
            for token in principal.tokens:
                try:
                    self.tokens.validate_token(token, audience, now)
                    ok = True
                    break
                except GatekeepError:
                    continue
        else:
            raise ValueError(f"unknown credential class {cred!r}")
        cache[cred] = ok
        return ok

    def check(
        self,
        graph: ZoneGraph,
        principal: PrincipalFixture,
        target: str,
        now: float,
    ) -> ReachabilityResult:
        """Allow iff some path from the principal's start node satisfies
        every edge's credential class; returns a witness path."""
        if target not in graph.nodes:
            raise UnknownTarget(target)
        start = principal.start_node
        if start == target:
            return ReachabilityResult(True, (start,))
        cache: dict[str, bool] = {}
        parents: dict[str, str] = {}
        seen = {start}
        queue: deque[str] = deque([start])
        while queue:
            node = queue.popleft()
            for edge in graph.out_edges(node):
                if edge.dst in seen:
                    continue
                if not self.edge_satisfied(edge, principal, now, cache):
                    continue
                parents[edge.dst] = node
                if edge.dst == target:
                    path = [target]
                    while path[-1] != start:
                        path.append(parents[path[-1]])
                    return ReachabilityResult(True, tuple(reversed(path)))
                seen.add(edge.dst)
                queue.append(edge.dst)
        return ReachabilityResult(False)


@dataclass
class AccessMatrix:
    rows: list[str]
    columns: list[str]
    cells: dict[tuple[str, str], str]
    witnesses: dict[tuple[str, str], tuple[str, ...]] = field(default_factory=dict)

    def is_complete(self) -> bool:
        return all(
            (r, c) in self.cells and self.cells[(r, c)] in ("allow", "deny")
            for r in self.rows for c in self.columns
        )

    def allow_count(self, row: str) -> int:
        return sum(
            1 for c in self.columns if self.cells[(row, c)] == "allow"
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "rows": list(self.rows),
            "columns": list(self.columns),
            "cells": {
                f"{r}|{c}": self.cells[(r, c)]
                for r in self.rows for c in self.columns
            },
            "witnesses": {
                f"{r}|{c}": list(path)
                for (r, c), path in sorted(self.witnesses.items())
            },
        }


def enumerate_access_matrix(
    graph: ZoneGraph,
    principals: list[PrincipalFixture],
    checker: ReachabilityChecker,
    now: float,
    targets: Optional[list[str]] = None,
) -> AccessMatrix:
    """Brute-force reachability over the full principal x target product.

    This is the oracle the module-level permission checks must equal.
    """
    columns = list(targets or MATRIX_TARGETS)
    matrix = AccessMatrix(
        rows=[p.name for p in principals], columns=columns, cells={}
    )
    for principal in principals:
        for target in columns:
            result = checker.check(graph, principal, target, now)
            matrix.cells[(principal.name, target)] = result.verdict
            if result.allowed:
                matrix.witnesses[(principal.name, target)] = result.path
    return matrix


def save_topology_fixture(graph: ZoneGraph, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(graph.to_json(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_topology_fixture(path: str | Path) -> ZoneGraph:
    return ZoneGraph.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
