"""Security centre: ingest/quarantine, alert rules vs a brute-force oracle,
advisory matching, configuration assessment, allowlisted export."""

from __future__ import annotations

import fnmatch
import json
import random
from collections import defaultdict

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatekeep import errors
from gatekeep.audit import (
    Alert,
    AlertRule,
    AuditEvent,
    InventoryRecord,
    SecurityCenter,
    parse_version,
    version_in_range,
)
from gatekeep.clock import VirtualClock


def brute_force_alerts(
    events: list[AuditEvent], rules: list[AlertRule], now: float
) -> set[tuple[str, str, int]]:
    """Independent recount: filter, bucket, threshold. No shared code with
    the implementation beyond the dataclasses."""
    out = set()
    for rule in rules:
        buckets: dict[str, int] = defaultdict(int)
        for event in events:
            if event.timestamp < now - rule.window_seconds or event.timestamp > now:
                continue
            if rule.outcome != "*" and event.outcome != rule.outcome:
                continue
            if not fnmatch.fnmatchcase(event.action, rule.action_pattern):
                continue
            key = event.actor if rule.group_by == "actor" else event.source_domain
            buckets[key] += 1
        for key, count in buckets.items():
            if count >= rule.threshold:
                out.add((rule.rule_id, key, count))
    return out


def _event(clock, actor="user-1", action="idp.authenticate", outcome="deny",
           at=None, source="FDS"):
    return AuditEvent(
        timestamp=clock.now() if at is None else at,
        source_domain=source,
        actor=actor,
        action=action,
        outcome=outcome,
        attrs={},
        request_id="req",
    )


@pytest.fixture
def center(tmp_path, clock):
    rule = AlertRule(
        rule_id="auth-fail-burst",
        action_pattern="idp.authenticate",
        outcome="deny",
        window_seconds=300.0,
        threshold=5,
        group_by="actor",
    )
    return SecurityCenter(tmp_path, clock, rules=[rule])


# --- ingest -------------------------------------------------------------------


def test_ingest_wellformed_events(center, clock):
    result = center.ingest([_event(clock) for _ in range(100)])
    assert result == {"accepted": 100, "quarantined": 0}
    assert center.event_count() == 100


def test_ingest_missing_timestamp_quarantined(center, clock):
    raw = _event(clock).to_json()
    del raw["timestamp"]
    result = center.ingest([raw])
    assert result == {"accepted": 0, "quarantined": 1}
    assert center.quarantined()[0]["problem"] == "missing timestamp"


def test_ingest_empty_stream(center):
    assert center.ingest([]) == {"accepted": 0, "quarantined": 0}


def test_quarantine_preserves_total_count(center, clock):
    rng = random.Random(99)
    submitted = []
    for _ in range(200):
        raw = _event(clock).to_json()
        breakage = rng.choice(
            ["ok", "ok", "no-ts", "bad-outcome", "bad-domain", "no-action"]
        )
        if breakage == "no-ts":
            del raw["timestamp"]
        elif breakage == "bad-outcome":
            raw["outcome"] = "maybe"
        elif breakage == "bad-domain":
            raw["source_domain"] = "ATLANTIS"
        elif breakage == "no-action":
            raw["action"] = ""
        submitted.append(raw)
    result = center.ingest(submitted)
    assert result["accepted"] + result["quarantined"] == len(submitted)
    assert center.event_count() == result["accepted"]
    assert len(center.quarantined()) == result["quarantined"]


def test_events_persisted_one_file_per_domain(center, clock):
    center.ingest([
        _event(clock, source="FDS"),
        _event(clock, source="SWS"),
        _event(clock, source="FDS"),
    ])
    fds_lines = (center.state_dir / "audit-fds.jsonl").read_text().splitlines()
    sws_lines = (center.state_dir / "audit-sws.jsonl").read_text().splitlines()
    assert len(fds_lines) == 2
    assert len(sws_lines) == 1
    assert all(json.loads(line)["source_domain"] == "FDS" for line in fds_lines)


def test_timestamps_monotone_per_source_in_deterministic_runs(stack):
    from gatekeep.scenarios import run_scenario

    run_scenario(4, stack)
    per_source: dict[str, list[float]] = defaultdict(list)
    for event in stack.siem.events():
        per_source[event.source_domain].append(event.timestamp)
    for domain, stamps in per_source.items():
        assert stamps == sorted(stamps), f"{domain} timestamps regressed"


# --- alert rules ----------------------------------------------------------------


def test_five_failures_in_three_minutes_alerts(center, clock):
    base = clock.now()
    for i in range(5):
        center.ingest([_event(clock, at=base + i * 36.0)])    # spread over 3 min
    clock.advance(5 * 36.0)
    alerts = center.evaluate_alert_rules()
    assert len(alerts) == 1
    assert alerts[0].rule_id == "auth-fail-burst"
    assert alerts[0].group_key == "user-1"
    assert alerts[0].count == 5


def test_four_failures_below_threshold(center, clock):
    base = clock.now()
    for i in range(4):
        center.ingest([_event(clock, at=base + i * 36.0)])
    clock.advance(5 * 36.0)
    assert center.evaluate_alert_rules() == []


def test_five_failures_spread_over_twenty_minutes(center, clock):
    base = clock.now()
    for i in range(5):
        center.ingest([_event(clock, at=base + i * 300.0)])    # 5 over 20 min
    clock.advance(4 * 300.0 + 1)
    assert center.evaluate_alert_rules() == []


def test_grouping_by_actor_isolates_users(center, clock):
    base = clock.now()
    for i in range(4):
        center.ingest([_event(clock, actor="left", at=base + i)])
        center.ingest([_event(clock, actor="right", at=base + i)])
    assert center.evaluate_alert_rules(base + 10) == []
    center.ingest([_event(clock, actor="left", at=base + 5)])
    alerts = center.evaluate_alert_rules(base + 10)
    assert [a.group_key for a in alerts] == ["left"]


def test_alerts_written_to_file(center, clock):
    base = clock.now()
    for i in range(5):
        center.ingest([_event(clock, at=base + i)])
    center.evaluate_alert_rules(base + 10)
    lines = (center.state_dir / "alerts.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["rule_id"] == "auth-fail-burst"


def test_alert_webhook_called(tmp_path, clock):
    calls: list[Alert] = []
    rule = AlertRule("r", "idp.*", "deny", 60.0, 1)
    center = SecurityCenter(
        tmp_path, clock, rules=[rule], alert_webhook=calls.append
    )
    center.ingest([_event(clock)])
    center.evaluate_alert_rules()
    assert len(calls) == 1


def test_rule_validation():
    with pytest.raises(ValueError):
        AlertRule("bad", "x.*", "deny", 60.0, 0)
    with pytest.raises(ValueError):
        AlertRule("bad", "x.*", "deny", 0.0, 1)
    with pytest.raises(ValueError):
        AlertRule("bad", "x.*", "deny", 60.0, 1, group_by="colour")


def test_alert_engine_equals_brute_force_oracle_1000_streams(tmp_path):
    """10^3 randomized event streams: the engine always equals the recount."""
    rng = random.Random(20240915)
    actions = ["idp.authenticate", "token.issue", "token.validate", "bastion.open"]
    outcomes = ["allow", "deny", "error"]
    actors = [f"user-{i}" for i in range(4)]
    for stream in range(1000):
        clock = VirtualClock(start=1_000_000.0)
        rules = [
            AlertRule(
                rule_id=f"rule-{r}",
                action_pattern=rng.choice(["idp.*", "token.*", "*.open", "*"]),
                outcome=rng.choice(["deny", "allow", "*"]),
                window_seconds=rng.choice([30.0, 120.0, 600.0]),
                threshold=rng.randint(1, 6),
                group_by=rng.choice(["actor", "source"]),
            )
            for r in range(rng.randint(1, 3))
        ]
        center = SecurityCenter(
            tmp_path / f"s{stream}", clock, rules=rules
        )
        events = [
            _event(
                clock,
                actor=rng.choice(actors),
                action=rng.choice(actions),
                outcome=rng.choice(outcomes),
                at=1_000_000.0 + rng.uniform(0, 900.0),
                source=rng.choice(["FDS", "SWS", "MDC", "SEC"]),
            )
            for _ in range(rng.randint(0, 40))
        ]
        center.ingest(events)
        now = 1_000_000.0 + rng.uniform(0, 1200.0)
        got = {
            (a.rule_id, a.group_key, a.count)
            for a in center.evaluate_alert_rules(now)
        }
        expected = brute_force_alerts(events, rules, now)
        assert got == expected, f"stream {stream} diverged"


@settings(max_examples=200, deadline=None)
@given(
    offsets=st.lists(
        st.floats(min_value=0.0, max_value=900.0), min_size=0, max_size=30
    ),
    threshold=st.integers(min_value=1, max_value=8),
    window=st.floats(min_value=1.0, max_value=600.0),
)
def test_alert_threshold_property(offsets, threshold, window):
    """Alert fires iff the brute-force windowed count reaches the threshold."""
    import tempfile

    clock = VirtualClock(start=2_000_000.0)
    rule = AlertRule("prop", "idp.authenticate", "deny", window, threshold)
    center = SecurityCenter(tempfile.mkdtemp(), clock, rules=[rule])
    events = [_event(clock, at=2_000_000.0 + off) for off in offsets]
    center.ingest(events)
    now = 2_000_000.0 + 900.0
    in_window = sum(1 for off in offsets if now - window <= 2_000_000.0 + off <= now)
    alerts = center.evaluate_alert_rules(now)
    assert bool(alerts) == (in_window >= threshold)
    if alerts:
        assert alerts[0].count == in_window


# --- advisories -----------------------------------------------------------------


def test_version_parsing():
    assert parse_version("1.2.3") == (1, 2, 3)
    assert parse_version("1.2") == (1, 2, 0)
    assert parse_version("2") == (2, 0, 0)
    with pytest.raises(errors.MalformedAdvisory):
        parse_version("not-a-version")


def test_version_ranges():
    assert version_in_range("1.2.3", "<1.3.0")
    assert not version_in_range("1.3.0", "<1.3.0")
    assert version_in_range("1.3.0", "<=1.3.0")
    assert version_in_range("2.5.1", ">=2.0.0,<3.0.0")
    assert not version_in_range("3.0.0", ">=2.0.0,<3.0.0")
    assert version_in_range("4.4.4", "==4.4.4")
    with pytest.raises(errors.MalformedAdvisory):
        version_in_range("1.0.0", "~>1.0")


def test_advisory_matching(center):
    snapshot = [
        InventoryRecord("host-a", "opensshd", "1.2.3"),
        InventoryRecord("host-b", "opensshd", "1.3.0"),
        InventoryRecord("host-b", "slurmd", "0.9.0"),
    ]
    advisories = [{"package": "opensshd", "affected": "<1.3.0"}]
    flagged = center.match_advisories(snapshot, advisories)
    assert flagged == [InventoryRecord("host-a", "opensshd", "1.2.3")]


def test_advisory_empty_list(center):
    snapshot = [InventoryRecord("host-a", "thing", "1.0.0")]
    assert center.match_advisories(snapshot, []) == []


def test_malformed_advisory(center):
    with pytest.raises(errors.MalformedAdvisory):
        center.match_advisories([], [{"package": "x"}])


def test_inventory_uniqueness_per_host(center):
    center.record_inventory("host-a", {"pkg": "1.0.0", "other": "2.0.0"})
    center.record_inventory("host-a", {"pkg": "1.1.0"})
    snapshot = center.inventory_snapshot()
    keys = [(r.host_id, r.package) for r in snapshot]
    assert len(keys) == len(set(keys))
    assert InventoryRecord("host-a", "pkg", "1.1.0") in snapshot


# --- configuration assessment -----------------------------------------------------


RULESET = [
    {"check_id": "ssh-no-passwords", "key": "ssh.password_auth", "expected": False},
    {"check_id": "ssh-no-root", "key": "ssh.permit_root_login", "expected": False},
    {"check_id": "fw-default-deny", "key": "firewall.default", "expected": "deny"},
    {"check_id": "log-forwarding", "key": "logging.forward_to_sec", "expected": True},
]


def test_failing_host_produces_fail_finding(center):
    center.record_inventory("host-a", {}, config={
        "ssh": {"password_auth": True, "permit_root_login": False},
        "firewall": {"default": "deny"},
        "logging": {"forward_to_sec": True},
    })
    findings, score = center.run_config_assessment(["host-a"], RULESET)
    by_check = {f.check_id: f.status for f in findings}
    assert by_check["ssh-no-passwords"] == "fail"
    assert by_check["ssh-no-root"] == "pass"
    assert score == pytest.approx(3 / 4)


def test_all_checks_pass_score_one(center):
    center.record_inventory("host-a", {}, config={
        "ssh": {"password_auth": False, "permit_root_login": False},
        "firewall": {"default": "deny"},
        "logging": {"forward_to_sec": True},
    })
    findings, score = center.run_config_assessment(["host-a"], RULESET)
    assert score == 1.0
    assert all(f.status == "pass" for f in findings)


def test_three_hosts_four_checks_twelve_findings(center):
    for host in ("host-a", "host-b", "host-c"):
        center.record_inventory(host, {}, config={
            "ssh": {"password_auth": False, "permit_root_login": False},
            "firewall": {"default": "deny"},
            "logging": {"forward_to_sec": True},
        })
    findings, _ = center.run_config_assessment(
        ["host-a", "host-b", "host-c"], RULESET
    )
    assert len(findings) == 12
    # completeness: every (host, check) pair appears exactly once
    pairs = {(f.host_id, f.check_id) for f in findings}
    assert len(pairs) == 12


def test_unknown_host(center):
    with pytest.raises(errors.UnknownHost):
        center.run_config_assessment(["ghost"], RULESET)


# --- export --------------------------------------------------------------------


def test_export_applies_field_allowlist(center, clock):
    center.ingest([_event(clock, actor="secret-user")])
    exported = center.export()
    assert len(exported) == 1
    assert set(exported[0]) == {"timestamp", "action", "outcome", "source_domain"}
    assert "secret-user" not in json.dumps(exported)


def test_export_custom_allowlist(tmp_path, clock):
    center = SecurityCenter(
        tmp_path, clock, export_allowlist=("action", "actor")
    )
    center.ingest([_event(clock, actor="visible")])
    exported = center.export()
    assert exported == [{"action": "idp.authenticate", "actor": "visible"}]
