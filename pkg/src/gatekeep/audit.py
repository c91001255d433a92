"""Security operations centre: audit ingest, alerting, inventory, assessment.

Every service in the plane emits one audit event per access decision into
this module. Storage is an append-only JSON-lines file per source domain
with an in-memory index, so the security zone stays inspectable with
ordinary tools. Alert rules are threshold counts over sliding windows.
"""

from __future__ import annotations

import contextvars
import fnmatch
import json
import re
import threading
import uuid
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .clock import Clock
from .errors import MalformedAdvisory, UnknownHost

SOURCE_DOMAINS = ("MDC", "SWS", "FDS", "SEC")
OUTCOMES = ("allow", "deny", "error")

# Fields the external 24/7 monitoring feed is allowed to see.
DEFAULT_EXPORT_ALLOWLIST = ("timestamp", "action", "outcome", "source_domain")

# Request id propagated from the HTTP layer into audit events.
current_request_id: contextvars.ContextVar[str | None] = contextvars.ContextVar(
    "gatekeep_request_id", default=None
)


def request_id() -> str:
    rid = current_request_id.get()
    return rid if rid else uuid.uuid4().hex[:12]


@dataclass(frozen=True)
class AuditEvent:
    timestamp: float
    source_domain: str
    actor: str
    action: str
    outcome: str
    attrs: dict[str, str] = field(default_factory=dict)
    request_id: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "source_domain": self.source_domain,
            "actor": self.actor,
            "action": self.action,
            "outcome": self.outcome,
            "attrs": dict(self.attrs),
            "request_id": self.request_id,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "AuditEvent":
        return cls(
            timestamp=float(data["timestamp"]),
            source_domain=data["source_domain"],
            actor=data["actor"],
            action=data["action"],
            outcome=data["outcome"],
            attrs=dict(data.get("attrs") or {}),
            request_id=data.get("request_id", ""),
        )


def validate_event(data: dict[str, Any]) -> str | None:
    """Schema check for a raw event dict. Returns a problem string or None."""
    if not isinstance(data, dict):
        return "not an object"
    if data.get("timestamp") is None:
        return "missing timestamp"
    try:
        float(data["timestamp"])
    except (TypeError, ValueError):
        return "bad timestamp"
    if data.get("source_domain") not in SOURCE_DOMAINS:
        return "bad source_domain"
    if not data.get("actor"):
        return "missing actor"
    action = data.get("action")
    if not action or not isinstance(action, str) or "." not in action:
        return "bad action"
    if data.get("outcome") not in OUTCOMES:
        return "bad outcome"
    attrs = data.get("attrs", {})
    if attrs is not None and not isinstance(attrs, dict):
        return "bad attrs"
    return None


@dataclass
class AlertRule:
    rule_id: str
    action_pattern: str          # fnmatch glob over the dotted action
    outcome: str                 # outcome filter, or "*"
    window_seconds: float
    threshold: int
    group_by: str = "actor"      # "actor" | "source"

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if self.window_seconds <= 0:
            raise ValueError("window must be > 0")
        if self.group_by not in ("actor", "source"):
            raise ValueError("group_by must be actor or source")

    def matches(self, event: AuditEvent) -> bool:
        if self.outcome != "*" and event.outcome != self.outcome:
            return False
        return fnmatch.fnmatchcase(event.action, self.action_pattern)


@dataclass(frozen=True)
class Alert:
    rule_id: str
    group_key: str
    count: int
    window_start: float
    window_end: float

    def to_json(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "group_key": self.group_key,
            "count": self.count,
            "window_start": self.window_start,
            "window_end": self.window_end,
        }


@dataclass(frozen=True)
class InventoryRecord:
    host_id: str
    package: str
    version: str


@dataclass(frozen=True)
class ComplianceFinding:
    check_id: str
    host_id: str
    status: str        # "pass" | "fail"
    evidence: str


_SEMVER_RE = re.compile(r"^(\d+)(?:\.(\d+))?(?:\.(\d+))?$")


def parse_version(text: str) -> tuple[int, int, int]:
    m = _SEMVER_RE.match(text.strip())
    if not m:
        raise MalformedAdvisory(f"bad version: {text!r}")
    return tuple(int(g or 0) for g in m.groups())  # type: ignore[return-value]


_COMPARATOR_RE = re.compile(r"^(<=|>=|==|<|>)\s*([\d.]+)$")

_OPS: dict[str, Callable[[tuple, tuple], bool]] = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
}


def version_in_range(version: str, range_expr: str) -> bool:
    """True when `version` satisfies every comma-separated comparator."""
    v = parse_version(version)
    parts = [p.strip() for p in range_expr.split(",") if p.strip()]
    if not parts:
        raise MalformedAdvisory("empty version range")
    for part in parts:
        m = _COMPARATOR_RE.match(part)
        if not m:
            raise MalformedAdvisory(f"bad range clause: {part!r}")
        op, bound = m.groups()
        if not _OPS[op](v, parse_version(bound)):
            return False
    return True


class SecurityCenter:
    """SEC-domain SIEM: durable event store plus the three SOC tasks.

    Ingest is multi-producer but appends under a per-domain lock; rule
    evaluation snapshots the index and never blocks ingest.
    """

    source_domain = "SEC"

    def __init__(
        self,
        state_dir: str | Path,
        clock: Clock,
        rules: Optional[list[AlertRule]] = None,
        export_allowlist: Iterable[str] = DEFAULT_EXPORT_ALLOWLIST,
        alert_webhook: Optional[Callable[[Alert], None]] = None,
    ):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.rules: list[AlertRule] = list(rules or [])
        self.export_allowlist = tuple(export_allowlist)
        self.alert_webhook = alert_webhook
        self._events: list[AuditEvent] = []
        self._quarantined: list[dict[str, Any]] = []
        self._inventory: dict[str, list[InventoryRecord]] = {}
        self._host_configs: dict[str, dict[str, Any]] = {}
        self._locks: dict[str, threading.Lock] = {
            d: threading.Lock() for d in SOURCE_DOMAINS
        }
        self._index_lock = threading.Lock()
        self._files: dict[str, Any] = {}
        self._quarantine_path = self.state_dir / "quarantine.jsonl"

    def _append_line(self, domain: str, payload: dict[str, Any]) -> None:
        fh = self._files.get(domain)
        if fh is None:
            fh = (self.state_dir / f"audit-{domain.lower()}.jsonl").open(
                "a", encoding="utf-8"
            )
            self._files[domain] = fh
        fh.write(json.dumps(payload, sort_keys=True) + "\n")
        fh.flush()

    def ingest(self, events: Iterable[AuditEvent | dict[str, Any]]) -> dict[str, int]:
        """Append events; malformed ones are quarantined, never dropped."""
        accepted = 0
        quarantined = 0
        for item in events:
            raw = item.to_json() if isinstance(item, AuditEvent) else item
            problem = validate_event(raw)
            if problem is not None:
                quarantined += 1
                with self._index_lock:
                    self._quarantined.append({"problem": problem, "event": raw})
                with self._quarantine_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"problem": problem, "event": raw}) + "\n")
                continue
            event = item if isinstance(item, AuditEvent) else AuditEvent.from_json(raw)
            domain = event.source_domain
            with self._locks[domain]:
                self._append_line(domain, event.to_json())
            with self._index_lock:
                self._events.append(event)
            accepted += 1
        return {"accepted": accepted, "quarantined": quarantined}

    def emit(self, event: AuditEvent) -> None:
        result = self.ingest([event])
        if result["accepted"] != 1:
            raise ValueError(f"internal event rejected: {event}")

    def events(self) -> list[AuditEvent]:
        with self._index_lock:
            return list(self._events)

    def quarantined(self) -> list[dict[str, Any]]:
        with self._index_lock:
            return list(self._quarantined)

    def event_count(self) -> int:
        with self._index_lock:
            return len(self._events)

    # --- task 1: alerting ---

    def evaluate_alert_rules(self, now: Optional[float] = None) -> list[Alert]:
        """One alert per (rule, group) meeting its threshold in the window."""
        at = self.clock.now() if now is None else now
        snapshot = self.events()
        alerts: list[Alert] = []
        for rule in self.rules:
            start = at - rule.window_seconds
            counts: dict[str, int] = defaultdict(int)
            for event in snapshot:
                if not (start <= event.timestamp <= at):
                    continue
                if rule.matches(event):
                    key = (
                        event.actor if rule.group_by == "actor"
                        else event.source_domain
                    )
                    counts[key] += 1
            for key in sorted(counts):
                if counts[key] >= rule.threshold:
                    alerts.append(
                        Alert(rule.rule_id, key, counts[key], start, at)
                    )
        self._write_alerts(alerts)
        return alerts

    def _write_alerts(self, alerts: list[Alert]) -> None:
        if not alerts:
            return
        with (self.state_dir / "alerts.jsonl").open("a", encoding="utf-8") as fh:
            for alert in alerts:
                fh.write(json.dumps(alert.to_json(), sort_keys=True) + "\n")
                if self.alert_webhook is not None:
                    self.alert_webhook(alert)

    # --- task 2: inventory vs advisories ---

    def record_inventory(
        self, host_id: str, packages: dict[str, str],
        config: Optional[dict[str, Any]] = None,
    ) -> list[InventoryRecord]:
        records = [
            InventoryRecord(host_id, name, version)
            for name, version in sorted(packages.items())
        ]
        with self._index_lock:
            self._inventory[host_id] = records
            if config is not None:
                self._host_configs[host_id] = config
        return records

    def inventory_snapshot(self) -> list[InventoryRecord]:
        with self._index_lock:
            return [
                r for host in sorted(self._inventory)
                for r in self._inventory[host]
            ]

    def match_advisories(
        self,
        snapshot: Iterable[InventoryRecord],
        advisories: Iterable[dict[str, str]],
    ) -> list[InventoryRecord]:
        """Every (host, package, version) inside any advisory's affected range."""
        parsed = []
        for adv in advisories:
            if "package" not in adv or "affected" not in adv:
                raise MalformedAdvisory(f"advisory missing fields: {adv}")
            parsed.append((adv["package"], adv["affected"]))
        vulnerable = []
        for record in snapshot:
            for package, affected in parsed:
                if record.package == package and version_in_range(
                    record.version, affected
                ):
                    vulnerable.append(record)
                    break
        return vulnerable

    # --- task 3: configuration assessment ---

    def run_config_assessment(
        self, hosts: Iterable[str], ruleset: Iterable[dict[str, Any]]
    ) -> tuple[list[ComplianceFinding], float]:
        """Apply every declarative check to every host; score = pass/total."""
        with self._index_lock:
            configs = dict(self._host_configs)
        host_list = list(hosts)
        checks = list(ruleset)
        findings: list[ComplianceFinding] = []
        for host in host_list:
            if host not in configs:
                raise UnknownHost(host)
            doc = configs[host]
            for check in checks:
                actual = _dig(doc, check["key"])
                expected = check["expected"]
                op = check.get("op", "eq")
                if op == "eq":
                    ok = actual == expected
                elif op == "ne":
                    ok = actual != expected
                elif op == "in":
                    ok = actual in expected
                else:
                    raise ValueError(f"unknown op {op!r}")
                findings.append(
                    ComplianceFinding(
                        check_id=check["check_id"],
                        host_id=host,
                        status="pass" if ok else "fail",
                        evidence=f"{check['key']}={actual!r} (want {op} {expected!r})",
                    )
                )
        total = len(findings)
        score = (
            sum(1 for f in findings if f.status == "pass") / total if total else 1.0
        )
        return findings, score

    # --- external monitoring export ---

    def export(self) -> list[dict[str, Any]]:
        """Allowlist-filtered stream for the external monitoring provider."""
        out = []
        for event in self.events():
            raw = event.to_json()
            out.append({k: raw[k] for k in self.export_allowlist if k in raw})
        return out


def _dig(doc: dict[str, Any], dotted: str) -> Any:
    node: Any = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


class OpCounter:
    """Counts decision-operation invocations, independent of audit emission.

    The parity check compares these counts with ingested event counts; the
    two are maintained by different code paths on purpose.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.total = 0
        self.by_action: dict[str, int] = defaultdict(int)

    def hit(self, action: str) -> None:
        with self._lock:
            self.total += 1
            self.by_action[action] += 1


def decision_op(action: str):
    """Marks a service method as an allow/deny-returning operation."""

    def decorate(fn):
        def wrapper(self, *args, **kwargs):
            counter = getattr(self, "op_counter", None)
            if counter is not None:
                counter.hit(action)
            return fn(self, *args, **kwargs)

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        wrapper.__wrapped__ = fn
        wrapper.decision_action = action
        return wrapper

    return decorate


class AuditedService:
    """Mixin giving services a one-line audit emission helper."""

    source_domain = "FDS"
    clock: Clock

    def __init__(self, clock: Clock, audit_sink: Callable[[AuditEvent], None]):
        self.clock = clock
        self._audit_sink = audit_sink
        self.op_counter: Optional[OpCounter] = None

    def _emit(self, action: str, outcome: str, actor: str, **attrs: str) -> None:
        self._audit_sink(
            AuditEvent(
                timestamp=self.clock.now(),
                source_domain=self.source_domain,
                actor=actor or "anonymous",
                action=action,
                outcome=outcome,
                attrs={k: str(v) for k, v in attrs.items() if v is not None},
                request_id=request_id(),
            )
        )

    def _deny(
        self, action: str, err: Exception, actor: str, **attrs: str
    ) -> Exception:
        """Emit a deny event and hand back the error for raising."""
        code = getattr(err, "code", "error")
        self._emit(action, "deny", actor, reason=code, **attrs)
        return err
