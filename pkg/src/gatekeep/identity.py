"""Identity broker: multi-IdP authentication with authorization-led registration.

Users authenticate against a registry of simulated identity providers.
A federated identity only comes into existence when an unconsumed project
invitation authorizes it, and every identity keeps one persistent opaque
identifier no matter how many provider subjects get linked to it.

Simulated IdPs sign their assertions with a per-provider secret; assertion
fixtures are JSON files carrying the signature detached, so federation
semantics stay testable without any upstream network dependency.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import secrets
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional

from .audit import AuditedService, AuditEvent, decision_op
from .clock import Clock
from .errors import (
    AlreadyRegistered,
    AssertionInvalid,
    IdentitySuspended,
    MfaRequired,
    NotFound,
    PairAlreadyLinkedElsewhere,
    SessionExpired,
    UnknownIdP,
    UnregisteredIdentity,
)

CLOCK_SKEW_TOLERANCE = 60.0          # seconds an assertion may be "from the future"
DEFAULT_SESSION_TTL = 600.0          # login sessions are short; access lives in tokens

ASSURANCE_ORDER = {"low": 0, "medium": 1, "high": 2}


class IdPKind(str, Enum):
    FEDERATED = "federated"
    LAST_RESORT = "last_resort"
    ADMIN = "admin"


@dataclass(frozen=True)
class IdentityProvider:
    idp_id: str
    kind: IdPKind
    assurance: str                   # low | medium | high
    mfa_required: bool
    display_name: str
    secret: bytes = b""              # HMAC key the simulated IdP signs with

    def __post_init__(self) -> None:
        if self.assurance not in ASSURANCE_ORDER:
            raise ValueError(f"bad assurance {self.assurance!r}")
        if self.kind == IdPKind.ADMIN and (
            not self.mfa_required or self.assurance != "high"
        ):
            raise ValueError("admin IdPs must require MFA at high assurance")


@dataclass(frozen=True)
class IdPAssertion:
    idp_id: str
    subject: str
    email: str
    mfa_satisfied: bool
    issued_at: float
    signature: str = ""

    def signing_payload(self) -> bytes:
        body = {
            "idp_id": self.idp_id,
            "subject": self.subject,
            "email": self.email,
            "mfa_satisfied": self.mfa_satisfied,
            "issued_at": self.issued_at,
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    def to_json(self) -> dict[str, Any]:
        return {
            "idp_id": self.idp_id,
            "subject": self.subject,
            "email": self.email,
            "mfa_satisfied": self.mfa_satisfied,
            "issued_at": self.issued_at,
            "signature": self.signature,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "IdPAssertion":
        return cls(
            idp_id=data["idp_id"],
            subject=data["subject"],
            email=data["email"],
            mfa_satisfied=bool(data["mfa_satisfied"]),
            issued_at=float(data["issued_at"]),
            signature=data.get("signature", ""),
        )


def sign_assertion(assertion: IdPAssertion, secret: bytes) -> IdPAssertion:
    mac = hmac.new(secret, assertion.signing_payload(), hashlib.sha256)
    return replace(assertion, signature=mac.hexdigest())


@dataclass
class FederatedIdentity:
    persistent_id: str
    primary_link: tuple[str, str]    # (idp_id, subject)
    linked: set[tuple[str, str]]
    email: str
    assurance: str
    registered_at: float
    status: str = "active"           # active | suspended


@dataclass(frozen=True)
class AuthSession:
    session_id: str
    persistent_id: str
    idp_id: str
    authenticated_at: float
    expires_at: float
    mfa_satisfied: bool


def new_persistent_id() -> str:
    """16 random bytes as lowercase base32: stable, opaque, non-derivable."""
    raw = secrets.token_bytes(16)
    return base64.b32encode(raw).decode().rstrip("=").lower()


@dataclass
class _DeviceGrant:
    device_code: str
    user_code: str
    expires_at: float
    approved_by: Optional[AuthSession] = None


class IdentityBroker(AuditedService):
    source_domain = "FDS"

    def __init__(
        self,
        clock: Clock,
        audit_sink: Callable[[AuditEvent], None],
        registry,                       # ProjectRegistry; invitation authority
        session_ttl: float = DEFAULT_SESSION_TTL,
    ):
        super().__init__(clock, audit_sink)
        self.registry = registry
        self.session_ttl = session_ttl
        self._idps: dict[str, IdentityProvider] = {}
        self._identities: dict[str, FederatedIdentity] = {}
        self._pair_index: dict[tuple[str, str], str] = {}
        self._sessions: dict[str, AuthSession] = {}
        self._device_grants: dict[str, _DeviceGrant] = {}
        self._user_codes: dict[str, str] = {}
        self._lock = threading.RLock()
        # Set by the stack so token issuance can reject revoked sessions.
        self.session_revoked_hook: Optional[Callable[[str], bool]] = None

    # --- provider registry ---

    def add_idp(self, idp: IdentityProvider) -> None:
        with self._lock:
            if idp.idp_id in self._idps:
                raise ValueError(f"duplicate idp_id {idp.idp_id!r}")
            self._idps[idp.idp_id] = idp

    def get_idp(self, idp_id: str) -> IdentityProvider:
        idp = self._idps.get(idp_id)
        if idp is None:
            raise UnknownIdP(idp_id)
        return idp

    def discover_idps(self, kind: Optional[IdPKind | str] = None) -> list[IdentityProvider]:
        """Login-page listing; the admin provider stays hidden unless asked for."""
        wanted = IdPKind(kind) if kind is not None else None
        with self._lock:
            providers = list(self._idps.values())
        if wanted is None:
            providers = [p for p in providers if p.kind != IdPKind.ADMIN]
        else:
            providers = [p for p in providers if p.kind == wanted]
        return sorted(providers, key=lambda p: p.display_name)

    # --- assertion checks ---

    def _check_assertion(self, idp: IdentityProvider, assertion: IdPAssertion) -> None:
        if assertion.idp_id != idp.idp_id:
            raise AssertionInvalid("assertion idp_id mismatch")
        if assertion.issued_at > self.clock.now() + CLOCK_SKEW_TOLERANCE:
            raise AssertionInvalid("assertion issued in the future")
        if idp.secret:
            expected = hmac.new(
                idp.secret, assertion.signing_payload(), hashlib.sha256
            ).hexdigest()
            if not hmac.compare_digest(expected, assertion.signature):
                raise AssertionInvalid("bad assertion signature")

    # --- operations ---

    @decision_op("idp.authenticate")
    def authenticate(self, idp_id: str, assertion: IdPAssertion) -> AuthSession:
        actor = "anonymous"
        try:
            idp = self.get_idp(idp_id)
            self._check_assertion(idp, assertion)
            if idp.mfa_required and not assertion.mfa_satisfied:
                raise MfaRequired(idp_id)
            with self._lock:
                pid = self._pair_index.get((idp_id, assertion.subject))
                if pid is None:
                    raise UnregisteredIdentity(
                        f"{idp_id}:{assertion.subject} has no registration"
                    )
                actor = pid
                identity = self._identities[pid]
                if identity.status != "active":
                    raise IdentitySuspended(pid)
                now = self.clock.now()
                session = AuthSession(
                    session_id=secrets.token_hex(16),
                    persistent_id=pid,
                    idp_id=idp_id,
                    authenticated_at=now,
                    expires_at=now + self.session_ttl,
                    mfa_satisfied=assertion.mfa_satisfied,
                )
                self._sessions[session.session_id] = session
        except Exception as err:
            raise self._deny("idp.authenticate", err, actor, idp=idp_id)
        self._emit("idp.authenticate", "allow", pid, idp=idp_id)
        return session

    @decision_op("identity.register")
    def register_identity(
        self, assertion: IdPAssertion, invitation_token: str
    ) -> FederatedIdentity:
        """Create an identity only when an invitation authorizes it.

        Identity creation, invitation consumption and role-binding creation
        commit together; any failure rolls the new identity back.
        """
        try:
            idp = self.get_idp(assertion.idp_id)
            self._check_assertion(idp, assertion)
            if idp.mfa_required and not assertion.mfa_satisfied:
                raise MfaRequired(assertion.idp_id)
            with self._lock:
                pair = (assertion.idp_id, assertion.subject)
                if pair in self._pair_index:
                    raise AlreadyRegistered(f"{pair} already linked")
                identity = FederatedIdentity(
                    persistent_id=new_persistent_id(),
                    primary_link=pair,
                    linked={pair},
                    email=assertion.email,
                    assurance=idp.assurance,
                    registered_at=self.clock.now(),
                )
                self._identities[identity.persistent_id] = identity
                self._pair_index[pair] = identity.persistent_id
                try:
                    self.registry.consume_invitation(
                        invitation_token,
                        identity.persistent_id,
                        expected_email=assertion.email,
                    )
                except Exception:
                    del self._identities[identity.persistent_id]
                    del self._pair_index[pair]
                    raise
        except Exception as err:
            raise self._deny(
                "identity.register", err, "anonymous", idp=assertion.idp_id
            )
        self._emit(
            "identity.register", "allow", identity.persistent_id,
            idp=assertion.idp_id,
        )
        return identity

    @decision_op("identity.link")
    def link_identity(
        self, session: AuthSession, second_assertion: IdPAssertion
    ) -> FederatedIdentity:
        actor = session.persistent_id
        try:
            self.require_session(session.session_id)
            idp = self.get_idp(second_assertion.idp_id)
            self._check_assertion(idp, second_assertion)
            with self._lock:
                pair = (second_assertion.idp_id, second_assertion.subject)
                owner = self._pair_index.get(pair)
                identity = self._identities[session.persistent_id]
                if owner is not None and owner != identity.persistent_id:
                    raise PairAlreadyLinkedElsewhere(f"{pair} owned by {owner}")
                identity.linked.add(pair)
                self._pair_index[pair] = identity.persistent_id
                identity.assurance = max(
                    (self._idps[i].assurance for i, _ in identity.linked
                     if i in self._idps),
                    key=lambda a: ASSURANCE_ORDER[a],
                )
        except Exception as err:
            raise self._deny(
                "identity.link", err, actor, idp=second_assertion.idp_id
            )
        self._emit("identity.link", "allow", actor, idp=second_assertion.idp_id)
        return identity

    def resolve_persistent_id(self, idp_id: str, subject: str) -> str:
        """Deterministic pair lookup; the identifier never changes once minted."""
        with self._lock:
            pid = self._pair_index.get((idp_id, subject))
        if pid is None:
            raise NotFound(f"{idp_id}:{subject}")
        return pid

    # --- session helpers ---

    def require_session(self, session_id: str) -> AuthSession:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise SessionExpired("unknown session")
        if self.clock.now() >= session.expires_at:
            raise SessionExpired(session_id)
        if self.session_revoked_hook is not None and self.session_revoked_hook(
            session_id
        ):
            raise SessionExpired("session revoked")
        identity = self._identities.get(session.persistent_id)
        if identity is None or identity.status != "active":
            raise SessionExpired("identity no longer active")
        return session

    def lookup_session(self, session_id: str) -> Optional[AuthSession]:
        """Raw record including expired sessions, for ownership checks."""
        with self._lock:
            return self._sessions.get(session_id)

    def get_identity(self, persistent_id: str) -> FederatedIdentity:
        with self._lock:
            identity = self._identities.get(persistent_id)
        if identity is None:
            raise NotFound(persistent_id)
        return identity

    def suspend_identity(self, persistent_id: str) -> None:
        """Models the user no longer being affiliated with their IdP."""
        with self._lock:
            self.get_identity(persistent_id).status = "suspended"

    def admit_identity(self, idp_id: str, subject: str, email: str) -> FederatedIdentity:
        """Out-of-band admission for staff bootstrap: the human-check path.

        Ordinary users never come through here; their registration is led by
        a project invitation.
        """
        idp = self.get_idp(idp_id)
        with self._lock:
            pair = (idp_id, subject)
            if pair in self._pair_index:
                raise AlreadyRegistered(f"{pair} already linked")
            identity = FederatedIdentity(
                persistent_id=new_persistent_id(),
                primary_link=pair,
                linked={pair},
                email=email,
                assurance=idp.assurance,
                registered_at=self.clock.now(),
            )
            self._identities[identity.persistent_id] = identity
            self._pair_index[pair] = identity.persistent_id
        return identity

    # --- device-style login flow (CLI + portal approval page) ---

    def device_start(self, verification_uri: str = "/device") -> dict[str, Any]:
        grant = _DeviceGrant(
            device_code=secrets.token_hex(16),
            user_code="-".join(
                secrets.token_hex(2).upper() for _ in range(2)
            ),
            expires_at=self.clock.now() + 600.0,
        )
        with self._lock:
            self._device_grants[grant.device_code] = grant
            self._user_codes[grant.user_code] = grant.device_code
        return {
            "device_code": grant.device_code,
            "user_code": grant.user_code,
            "verification_uri": verification_uri,
            "interval": 1,
            "expires_at": grant.expires_at,
        }

    @decision_op("device.approve")
    def device_approve(self, user_code: str, session_id: str) -> None:
        """Portal-side approval: binds the grant to the approver's identity."""
        actor = "anonymous"
        try:
            session = self.require_session(session_id)
            actor = session.persistent_id
            with self._lock:
                device_code = self._user_codes.get(user_code)
                grant = self._device_grants.get(device_code or "")
                if grant is None or self.clock.now() >= grant.expires_at:
                    raise NotFound("unknown or expired user code")
                grant.approved_by = session
        except Exception as err:
            raise self._deny("device.approve", err, actor)
        self._emit("device.approve", "allow", actor)

    def device_poll(self, device_code: str) -> Optional[AuthSession]:
        """None while pending; a fresh session once the portal approved."""
        with self._lock:
            grant = self._device_grants.get(device_code)
            if grant is None or self.clock.now() >= grant.expires_at:
                raise NotFound("unknown or expired device code")
            if grant.approved_by is None:
                return None
            approver = grant.approved_by
            now = self.clock.now()
            session = AuthSession(
                session_id=secrets.token_hex(16),
                persistent_id=approver.persistent_id,
                idp_id=approver.idp_id,
                authenticated_at=now,
                expires_at=now + self.session_ttl,
                mfa_satisfied=approver.mfa_satisfied,
            )
            self._sessions[session.session_id] = session
            del self._device_grants[device_code]
            self._user_codes.pop(grant.user_code, None)
        return session

    # --- assertion fixtures on disk ---

    def load_assertion_file(self, path: str | Path) -> IdPAssertion:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return IdPAssertion.from_json(data)

    def write_assertion_fixture(
        self, directory: str | Path, name: str, assertion: IdPAssertion
    ) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{name}.json"
        path.write_text(
            json.dumps(assertion.to_json(), indent=2, sort_keys=True),
            encoding="utf-8",
        )
        return path
