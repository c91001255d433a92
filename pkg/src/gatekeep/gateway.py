"""Access gateway: bastion jump host, reverse-tunnel web ingress, kill switches.

Tunnels are in-process channels between the gateway and backend stubs; the
contract that matters is authenticated ingress, reverse connection
initiation and the signed claims header, not transport realism. A simple
per-source rate limiter stands in for the upstream DDoS-mitigation hop.

Kill switches are externally managed and scoped (user, service, global):
decisions beginning after engage() returns are denied, and engaging a user
scope also closes that user's open bastion sessions.
"""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import sshca
from .audit import AuditedService, AuditEvent, decision_op
from .clock import Clock
from .errors import (
    CertificateRejected,
    EndpointDown,
    Forbidden,
    GatekeepError,
    KillSwitched,
    PathTaken,
    RateLimited,
    TokenInvalid,
    Unauthenticated,
    UnknownScope,
    UnknownTarget,
)

DEFAULT_RATE_LIMIT = 30.0            # requests per second per source
CLAIMS_HEADER = "X-Gatekeep-Claims"


@dataclass
class TunnelEndpoint:
    path: str
    service_id: str                  # audience suffix, e.g. "jupyter"
    client_id: str
    state: str = "connected"         # connected | disconnected


@dataclass
class KillSwitch:
    scope: tuple[str, Optional[str]]     # ("user", pid) | ("service", id) | ("global", None)
    engaged_at: float
    engaged_by: str
    state: str = "engaged"           # engaged | released
    released_at: Optional[float] = None

    def to_json(self) -> dict[str, Any]:
        kind, ident = self.scope
        return {
            "scope": kind if ident is None else f"{kind}:{ident}",
            "engaged_at": self.engaged_at,
            "engaged_by": self.engaged_by,
            "state": self.state,
            "released_at": self.released_at,
        }


@dataclass
class BastionSession:
    session_ref: str
    principal: str
    certificate_serial: int
    target: str
    opened_at: float
    closed_at: Optional[float] = None
    subject: str = ""


def parse_scope(scope: str) -> tuple[str, Optional[str]]:
    if scope == "global":
        return ("global", None)
    kind, _, ident = scope.partition(":")
    if kind in ("user", "service") and ident:
        return (kind, ident)
    raise UnknownScope(scope)


class KillSwitchPanel:
    """Scope-keyed switch states with a single atomic read per decision."""

    def __init__(self, clock: Clock):
        self.clock = clock
        self._switches: dict[tuple[str, Optional[str]], KillSwitch] = {}
        self._lock = threading.Lock()

    def set(self, scope: tuple[str, Optional[str]], engage: bool, actor: str) -> KillSwitch:
        with self._lock:
            if engage:
                switch = KillSwitch(
                    scope=scope,
                    engaged_at=self.clock.now(),
                    engaged_by=actor,
                )
                self._switches[scope] = switch
            else:
                switch = self._switches.get(scope)
                if switch is None:
                    switch = KillSwitch(
                        scope=scope,
                        engaged_at=self.clock.now(),
                        engaged_by=actor,
                        state="released",
                        released_at=self.clock.now(),
                    )
                    self._switches[scope] = switch
                else:
                    switch.state = "released"
                    switch.released_at = self.clock.now()
            return switch

    def blocks(self, sub: Optional[str] = None, service: Optional[str] = None) -> bool:
        with self._lock:
            g = self._switches.get(("global", None))
            if g is not None and g.state == "engaged":
                return True
            if sub is not None:
                s = self._switches.get(("user", sub))
                if s is not None and s.state == "engaged":
                    return True
            if service is not None:
                s = self._switches.get(("service", service))
                if s is not None and s.state == "engaged":
                    return True
            return False

    def snapshot(self) -> list[KillSwitch]:
        with self._lock:
            return list(self._switches.values())


class RateLimiter:
    """Token bucket per source; stands in for the DDoS-protection layer."""

    def __init__(self, clock: Clock, rate_per_second: float = DEFAULT_RATE_LIMIT):
        self.clock = clock
        self.rate = rate_per_second
        self._buckets: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()

    def check(self, source: str) -> bool:
        now = self.clock.now()
        with self._lock:
            level, last = self._buckets.get(source, (self.rate, now))
            level = min(self.rate, level + (now - last) * self.rate)
            if level < 1.0:
                self._buckets[source] = (level, now)
                return False
            self._buckets[source] = (level - 1.0, now)
            return True


class JupyterStub:
    """Simulated Jupyter authenticator + spawner behind the tunnel.

    Re-validates the forwarded token via introspection before spawning,
    exactly like the real authenticator checks the broker's OIDC endpoint.
    Every invocation is logged so tests can prove nothing unauthenticated
    ever reached the backend.
    """

    def __init__(self, introspect: Callable[[str, str], dict], audience: str):
        self._introspect = introspect
        self.audience = audience
        self.invocations: list[dict[str, Any]] = []
        self.spawned: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def handle(self, path: str, headers: dict[str, str], body: Any = None) -> dict[str, Any]:
        token = headers.get(CLAIMS_HEADER, "")
        result = self._introspect(token, self.audience)
        record = {
            "path": path,
            "claims": result if result.get("active") else None,
            "headers": dict(headers),
        }
        with self._lock:
            self.invocations.append(record)
        if not result.get("active"):
            return {"status": 401, "body": {"error": result.get("error", "invalid")}}
        spawn = {
            "user": result["sub"],
            "project": result.get("prj"),
            "kernel": f"kernel-{secrets.token_hex(4)}",
        }
        with self._lock:
            self.spawned.append(spawn)
        return {"status": 200, "body": {"spawned": True, **spawn}}


class AccessGateway(AuditedService):
    source_domain = "SWS"

    def __init__(
        self,
        clock: Clock,
        audit_sink: Callable[[AuditEvent], None],
        tokens,                         # TokenService
        ca,                             # CertificateAuthority
        login_nodes: Optional[list[str]] = None,
        rate_limit: float = DEFAULT_RATE_LIMIT,
    ):
        super().__init__(clock, audit_sink)
        self.tokens = tokens
        self.ca = ca
        self.killswitches = KillSwitchPanel(clock)
        self.rate_limiter = RateLimiter(clock, rate_limit)
        self.login_nodes = set(login_nodes or [])
        self._tunnels: dict[str, TunnelEndpoint] = {}
        self._backends: dict[str, Callable[[str, dict, Any], dict]] = {}
        self._sessions: list[BastionSession] = []
        self._lock = threading.RLock()

    # --- tunnels ---

    @decision_op("tunnel.register")
    def register_tunnel(
        self,
        service_token: str,
        path: str,
        client_id: str,
        backend: Callable[[str, dict, Any], dict],
    ) -> TunnelEndpoint:
        actor = "anonymous"
        try:
            try:
                claims = self.tokens.validate_token(service_token, "tunnel-admin")
            except GatekeepError as err:
                raise TokenInvalid(err.code)
            actor = claims["sub"]
            if claims.get("role") not in ("service", "admin"):
                raise TokenInvalid("tunnel registration needs a service principal")
            path = "/" + path.strip("/")
            service_id = path.strip("/")
            with self._lock:
                if path in self._tunnels:
                    raise PathTaken(path)
                endpoint = TunnelEndpoint(
                    path=path, service_id=service_id, client_id=client_id
                )
                self._tunnels[path] = endpoint
                self._backends[path] = backend
        except Exception as err:
            raise self._deny("tunnel.register", err, actor, path=path)
        self._emit("tunnel.register", "allow", actor, path=path,
                   client=client_id)
        return endpoint

    def set_tunnel_state(self, path: str, connected: bool) -> None:
        """Reverse tunnels drop when the inner client disconnects."""
        with self._lock:
            endpoint = self._tunnels.get(path)
            if endpoint is None:
                raise UnknownTarget(path)
            endpoint.state = "connected" if connected else "disconnected"

    def tunnel(self, path: str) -> Optional[TunnelEndpoint]:
        with self._lock:
            return self._tunnels.get(path)

    # --- web ingress ---

    @decision_op("tunnel.route")
    def route_web_request(
        self,
        path: str,
        user_token: Optional[str],
        source: Optional[str] = None,
        body: Any = None,
    ) -> dict[str, Any]:
        """Authenticated ingress: nothing reaches a backend without a
        validated token, and the backend re-validates what we forward."""
        actor = "anonymous"
        try:
            path = "/" + path.strip("/")
            with self._lock:
                endpoint = self._tunnels.get(path)
                backend = self._backends.get(path)
            if endpoint is None:
                raise UnknownTarget(path)
            if not self.rate_limiter.check(source or actor or "anonymous"):
                raise RateLimited(source or "anonymous")
            if self.killswitches.blocks(service=endpoint.service_id):
                raise KillSwitched(endpoint.service_id)
            if not user_token:
                raise Unauthenticated("no bearer token presented")
            audience = f"tunnel:{endpoint.service_id}"
            try:
                claims = self.tokens.validate_token(user_token, audience)
            except KillSwitched:
                raise
            except GatekeepError as err:
                raise Unauthenticated(err.code)
            actor = claims["sub"]
            if self.killswitches.blocks(sub=actor, service=endpoint.service_id):
                raise KillSwitched(actor)
            if endpoint.state != "connected":
                raise EndpointDown(path)
            headers = {CLAIMS_HEADER: user_token}
            response = backend(path, headers, body)
        except Exception as err:
            raise self._deny("tunnel.route", err, actor, path=path)
        self._emit("tunnel.route", "allow", actor, path=path,
                   status=str(response.get("status", "")))
        return response

    # --- bastion ---

    @decision_op("bastion.open")
    def open_bastion_session(
        self,
        certificate_blob: bytes,
        presented_principal: str,
        target_login_node: str,
    ) -> BastionSession:
        """Port-22 semantics only: verify the certificate, open a transparent
        relay to the login node, add no shell of our own."""
        actor = "anonymous"
        try:
            if target_login_node not in self.login_nodes:
                raise UnknownTarget(target_login_node)
            verdict = sshca.verify_certificate(
                certificate_blob,
                presented_principal,
                self.clock.now(),
                self.ca.public_key,
            )
            parsed_subject = ""
            if verdict.accepted:
                from . import sshwire

                parsed = sshwire.parse_certificate(certificate_blob)
                parsed_subject = parsed.key_id
                actor = parsed_subject
                serial = parsed.serial
            else:
                raise CertificateRejected(verdict.reason)
            if self.killswitches.blocks(sub=parsed_subject):
                raise KillSwitched(parsed_subject)
            session = BastionSession(
                session_ref=f"bastion-{secrets.token_hex(6)}",
                principal=presented_principal,
                certificate_serial=serial,
                target=target_login_node,
                opened_at=self.clock.now(),
                subject=parsed_subject,
            )
            with self._lock:
                self._sessions.append(session)
        except Exception as err:
            raise self._deny("bastion.open", err, actor,
                             principal=presented_principal,
                             target=target_login_node)
        self._emit("bastion.open", "allow", actor,
                   principal=presented_principal, target=target_login_node,
                   serial=str(serial))
        return session

    def open_sessions(self) -> list[BastionSession]:
        with self._lock:
            return [s for s in self._sessions if s.closed_at is None]

    def all_sessions(self) -> list[BastionSession]:
        with self._lock:
            return list(self._sessions)

    # --- kill switches ---

    @decision_op("killswitch.set")
    def set_kill_switch(
        self, admin_token: str, scope: str, engage: bool
    ) -> KillSwitch:
        actor = "anonymous"
        try:
            try:
                claims = self.tokens.validate_token(admin_token, "mgmt:killswitch")
            except GatekeepError as err:
                raise Forbidden(err.code)
            actor = claims["sub"]
            parsed = parse_scope(scope)
            switch = self.killswitches.set(parsed, engage, actor)
            if engage and parsed[0] == "user":
                self._close_user_sessions(parsed[1] or "")
            if engage and parsed[0] == "global":
                self._close_all_sessions()
        except Exception as err:
            raise self._deny("killswitch.set", err, actor, scope=scope)
        self._emit("killswitch.set", "allow", actor, scope=scope,
                   state=switch.state)
        return switch

    def _close_user_sessions(self, subject: str) -> None:
        now = self.clock.now()
        with self._lock:
            for session in self._sessions:
                if session.closed_at is None and session.subject == subject:
                    session.closed_at = now

    def _close_all_sessions(self) -> None:
        now = self.clock.now()
        with self._lock:
            for session in self._sessions:
                if session.closed_at is None:
                    session.closed_at = now

    def killswitch_blocks(self, sub: str, audience: str) -> bool:
        """Hook for token validation: translate token claims into scopes.

        The kill-switch control audience itself is exempt: the switch is
        externally managed, so a global engage must never lock out the hand
        that releases it.
        """
        if audience == "mgmt:killswitch":
            return False
        service = audience.split(":", 1)[1] if audience.startswith("tunnel:") else None
        return self.killswitches.blocks(sub=sub, service=service)


class ManagementGateway(AuditedService):
    """Separate ingress for the management plane: the tailnet model.

    Segmentation by construction: the only audience this gateway accepts is
    the management tailnet audience, and user-plane artifacts (certificates,
    tunnel tokens) mean nothing here.
    """

    source_domain = "SWS"
    audience = "mgmt:tailnet"

    def __init__(
        self,
        clock: Clock,
        audit_sink: Callable[[AuditEvent], None],
        tokens,
        killswitches: KillSwitchPanel,
        management_nodes: Optional[list[str]] = None,
    ):
        super().__init__(clock, audit_sink)
        self.tokens = tokens
        self.killswitches = killswitches
        self.management_nodes = set(management_nodes or [])
        self._sessions: list[BastionSession] = []
        self._lock = threading.Lock()

    @decision_op("mgmt.open")
    def open_admin_session(self, admin_token: str, target_node: str) -> BastionSession:
        actor = "anonymous"
        try:
            if target_node not in self.management_nodes:
                raise UnknownTarget(target_node)
            try:
                claims = self.tokens.validate_token(admin_token, self.audience)
            except GatekeepError as err:
                raise TokenInvalid(err.code)
            actor = claims["sub"]
            if self.killswitches.blocks(sub=actor, service="tailnet"):
                raise KillSwitched(actor)
            session = BastionSession(
                session_ref=f"tailnet-{secrets.token_hex(6)}",
                principal=claims["sub"],
                certificate_serial=0,
                target=target_node,
                opened_at=self.clock.now(),
                subject=claims["sub"],
            )
            with self._lock:
                self._sessions.append(session)
        except Exception as err:
            raise self._deny("mgmt.open", err, actor, target=target_node)
        self._emit("mgmt.open", "allow", actor, target=target_node)
        return session
