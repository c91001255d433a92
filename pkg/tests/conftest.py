from __future__ import annotations

from types import SimpleNamespace

import pytest

from gatekeep.clock import VirtualClock
from gatekeep.scenarios import _setup_project_with_members, new_keypair
from gatekeep.stack import ServiceStack


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock()


@pytest.fixture
def stack(clock: VirtualClock) -> ServiceStack:
    return ServiceStack(clock=clock).bootstrap()


@pytest.fixture
def world(stack: ServiceStack) -> SimpleNamespace:
    """Bootstrapped stack plus project camels with PI pat and researcher rae."""
    project, pat, rae = _setup_project_with_members(stack)
    return SimpleNamespace(
        stack=stack,
        clock=stack.clock,
        project=project,
        pat=pat,
        rae=rae,
        alice=stack.users["alice"],
        oscar=stack.users["oscar"],
    )


@pytest.fixture
def keypair():
    return new_keypair()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome, label in (("passed", "PASS"), ("failed", "FAIL"),
                           ("skipped", "SKIP")):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            if outcome != "skipped" and report.when != "call":
                continue
            name = nodeid.split("::")[-1].removeprefix("test_criterion_")
            lines.append((name, label))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, label in sorted(lines):
            terminalreporter.write_line(f"  {label}  {name.replace('_', ' ')}")
