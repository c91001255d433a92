"""Short-lived, signed, audience-scoped access tokens.

Tokens are the only access currency: every service names its own audience
and nothing validates across audiences. The wire format is the compact
three-part form (base64url header, canonical-JSON claims, Ed25519
signature) so standard JOSE tooling can inspect tokens. Revocation is a
centralized append-only set consulted on every validation, which is what
makes on-demand revocation effective within one validation cycle.
"""

from __future__ import annotations

import base64
import json
import secrets
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .audit import AuditedService, AuditEvent, decision_op
from .clock import Clock
from .errors import (
    AdminIdPRequired,
    AudienceMismatch,
    BadSignature,
    Expired,
    Forbidden,
    KillSwitched,
    NotAuthorized,
    NotYetValid,
    Revoked,
    UnknownTarget,
)
from .identity import IdPKind

USER_TOKEN_TTL = 3600.0          # ordinary service audiences
ADMIN_TOKEN_TTL = 900.0          # management-plane audiences
SERVICE_TOKEN_TTL = 3600.0       # internal service-plane principals


def audience_class_ttl(audience: str) -> float:
    return ADMIN_TOKEN_TTL if audience.startswith("mgmt:") else USER_TOKEN_TTL


def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64url(text: str) -> bytes:
    pad = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + pad)


@dataclass
class SigningKeypair:
    key_id: str
    private_key: Ed25519PrivateKey
    created_at: float
    state: str = "active"        # active | retired

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self.private_key.public_key()


@dataclass(frozen=True)
class TokenRecord:
    jti: str
    sub: str
    sid: str
    audience: str
    project_scope: Optional[str]
    expires_at: float


class RevocationSet:
    """Append-only revoked session/token ids with revocation timestamps."""

    def __init__(self, clock: Clock):
        self._clock = clock
        self._sessions: dict[str, float] = {}
        self._tokens: dict[str, float] = {}
        self._lock = threading.Lock()

    def revoke_session(self, sid: str) -> None:
        with self._lock:
            self._sessions.setdefault(sid, self._clock.now())

    def revoke_token(self, jti: str) -> None:
        with self._lock:
            self._tokens.setdefault(jti, self._clock.now())

    def session_revoked(self, sid: str) -> bool:
        with self._lock:
            return sid in self._sessions

    def token_revoked(self, jti: str) -> bool:
        with self._lock:
            return jti in self._tokens

    def is_revoked(self, sid: str, jti: str) -> bool:
        with self._lock:
            return sid in self._sessions or jti in self._tokens


def encode_token(claims: dict[str, Any], key: SigningKeypair) -> str:
    header = {"alg": "EdDSA", "typ": "JWT", "kid": key.key_id}
    head = _b64url(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    body = _b64url(json.dumps(claims, sort_keys=True, separators=(",", ":")).encode())
    signing_input = f"{head}.{body}".encode("ascii")
    sig = key.private_key.sign(signing_input)
    return f"{head}.{body}.{_b64url(sig)}"


def decode_token_unverified(token: str) -> tuple[dict[str, Any], dict[str, Any]]:
    parts = token.split(".")
    if len(parts) != 3:
        raise BadSignature("not a three-part token")
    try:
        header = json.loads(_unb64url(parts[0]))
        claims = json.loads(_unb64url(parts[1]))
    except (ValueError, json.JSONDecodeError):
        raise BadSignature("undecodable token segments")
    return header, claims


class TokenService(AuditedService):
    source_domain = "FDS"

    def __init__(
        self,
        clock: Clock,
        audit_sink: Callable[[AuditEvent], None],
        identity,                    # IdentityBroker
        registry,                    # ProjectRegistry
    ):
        super().__init__(clock, audit_sink)
        self.identity = identity
        self.registry = registry
        self.revocations = RevocationSet(clock)
        self._keys: dict[str, SigningKeypair] = {}
        self._issued: dict[str, TokenRecord] = {}
        self._key_lock = threading.RLock()
        self._active_key_id = self._new_key_locked()
        # Kill-switch probe installed by the access gateway.
        self.killswitch_hook: Optional[Callable[[str, str], bool]] = None
        # Let the broker refuse revoked sessions at issuance time.
        identity.session_revoked_hook = self.revocations.session_revoked
        registry.revocation_listeners.append(self.revoke_for_subject)

    # --- key registry ---

    def _new_key_locked(self) -> str:
        key = SigningKeypair(
            key_id=f"k-{secrets.token_hex(4)}",
            private_key=Ed25519PrivateKey.generate(),
            created_at=self.clock.now(),
        )
        with self._key_lock:
            self._keys[key.key_id] = key
            return key.key_id

    def active_key(self) -> SigningKeypair:
        with self._key_lock:
            return self._keys[self._active_key_id]

    @decision_op("token.rotate")
    def rotate_signing_key(self, actor_session) -> str:
        """Retire the active key (still verifies) and issue under a new one."""
        actor = actor_session.persistent_id
        try:
            session = self.identity.require_session(actor_session.session_id)
            if not self.registry.has_role(session.persistent_id, "admin"):
                raise Forbidden("admin role required")
            with self._key_lock:
                self._keys[self._active_key_id].state = "retired"
                self._active_key_id = self._new_key_locked()
                new_id = self._active_key_id
        except Exception as err:
            raise self._deny("token.rotate", err, actor)
        self._emit("token.rotate", "allow", actor, key_id=new_id)
        return new_id

    # --- issuance ---

    @decision_op("token.issue")
    def issue_token(
        self,
        auth_session,
        audience: str,
        project_scope: Optional[str] = None,
        ttl: Optional[float] = None,
    ) -> str:
        actor = auth_session.persistent_id
        try:
            session = self.identity.require_session(auth_session.session_id)
            if audience.startswith("mgmt:"):
                idp = self.identity.get_idp(session.idp_id)
                if idp.kind != IdPKind.ADMIN:
                    raise AdminIdPRequired(
                        "management audiences require the admin IdP"
                    )
            role, scope = self.registry.authorize_token(
                session.persistent_id, audience, project_scope
            )
            token = self._mint(
                sub=session.persistent_id,
                sid=session.session_id,
                role=role,
                audience=audience,
                project_scope=scope,
                ttl=ttl,
            )
        except Exception as err:
            raise self._deny("token.issue", err, actor, audience=audience)
        self._emit("token.issue", "allow", actor, audience=audience,
                   project=scope or "")
        return token

    def issue_service_token(
        self, service_id: str, audience: str, ttl: Optional[float] = None
    ) -> str:
        """Plane-internal principals (tunnel clients, log forwarders)."""
        return self._mint(
            sub=f"svc:{service_id}",
            sid=f"svc:{service_id}",
            role="service",
            audience=audience,
            project_scope=None,
            ttl=ttl if ttl is not None else SERVICE_TOKEN_TTL,
        )

    def _mint(
        self,
        sub: str,
        sid: str,
        role: str,
        audience: str,
        project_scope: Optional[str],
        ttl: Optional[float],
    ) -> str:
        if not audience:
            raise NotAuthorized("audience is required")
        cap = audience_class_ttl(audience)
        effective = cap if ttl is None else min(ttl, cap)
        now = self.clock.now()
        claims: dict[str, Any] = {
            "jti": secrets.token_hex(12),
            "sub": sub,
            "sid": sid,
            "role": role,
            "aud": audience,
            "iat": now,
            "exp": now + effective,
        }
        if project_scope is not None:
            claims["prj"] = project_scope
        token = encode_token(claims, self.active_key())
        record = TokenRecord(
            jti=claims["jti"], sub=sub, sid=sid, audience=audience,
            project_scope=project_scope, expires_at=claims["exp"],
        )
        with self._key_lock:
            self._issued[record.jti] = record
        return token

    # --- validation ---

    @decision_op("token.validate")
    def validate_token(
        self, token: str, expected_audience: str, now: Optional[float] = None
    ) -> dict[str, Any]:
        """Full check: signature, validity window, audience, revocation,
        kill switches. Valid iff iat <= now < exp, bounds exact."""
        actor = "anonymous"
        try:
            at = self.clock.now() if now is None else now
            header, claims = decode_token_unverified(token)
            actor = claims.get("sub", "anonymous")
            if any(k not in claims for k in ("jti", "sub", "sid", "aud", "iat", "exp")):
                raise BadSignature("claims incomplete")
            key = self._keys.get(header.get("kid", ""))
            if key is None:
                raise BadSignature(f"unknown key id {header.get('kid')!r}")
            head, body, sig = token.split(".")
            try:
                key.public_key.verify(
                    _unb64url(sig), f"{head}.{body}".encode("ascii")
                )
            except Exception:
                raise BadSignature("signature verification failed")
            if at < claims["iat"]:
                raise NotYetValid(f"token not valid before {claims['iat']}")
            if at >= claims["exp"]:
                raise Expired(f"token expired at {claims['exp']}")
            if claims.get("aud") != expected_audience:
                raise AudienceMismatch(
                    f"token for {claims.get('aud')!r}, expected {expected_audience!r}"
                )
            if self.revocations.is_revoked(claims.get("sid", ""), claims["jti"]):
                raise Revoked(claims["jti"])
            if self.killswitch_hook is not None and self.killswitch_hook(
                claims["sub"], claims["aud"]
            ):
                raise KillSwitched(claims["sub"])
        except Exception as err:
            raise self._deny("token.validate", err, actor,
                             audience=expected_audience)
        self._emit("token.validate", "allow", actor, audience=expected_audience)
        return claims

    # --- revocation ---

    @decision_op("token.revoke")
    def revoke_session(self, actor_session, target: str) -> dict[str, Any]:
        """Kill a session id or single token id, on demand.

        Admins may revoke anything; users only their own sessions/tokens.
        """
        actor = actor_session.persistent_id
        try:
            session = self.identity.require_session(actor_session.session_id)
            is_admin = self.registry.has_role(session.persistent_id, "admin")
            kind: str
            if target in self._issued:
                kind = "jti"
                owner = self._issued[target].sub
            else:
                target_session = self.identity.lookup_session(target)
                if target_session is None:
                    raise UnknownTarget(target)
                kind = "sid"
                owner = target_session.persistent_id
            if not is_admin and owner != session.persistent_id:
                raise Forbidden("only admins may revoke others' access")
            if kind == "jti":
                self.revocations.revoke_token(target)
            else:
                self.revocations.revoke_session(target)
        except Exception as err:
            raise self._deny("token.revoke", err, actor, target=target)
        self._emit("token.revoke", "allow", actor, target=target, kind=kind)
        return {"revoked": target, "kind": kind, "at": self.clock.now()}

    def revoke_for_subject(
        self, persistent_id: str, project_id: Optional[str]
    ) -> int:
        """Registry callback: authorization was withdrawn, so flag every
        live token the subject holds in that scope (tokens without a project
        scope grant cross-project access and are flagged as well)."""
        now = self.clock.now()
        count = 0
        with self._key_lock:
            records = list(self._issued.values())
        for record in records:
            if record.sub != persistent_id:
                continue
            if record.expires_at <= now:
                continue
            if (
                project_id is None
                or record.project_scope is None
                or record.project_scope == project_id
            ):
                self.revocations.revoke_token(record.jti)
                count += 1
        return count

    # --- introspection helpers ---

    def introspect(self, token: str, expected_audience: str) -> dict[str, Any]:
        """OAuth-style introspection envelope: active flag plus claims."""
        try:
            claims = self.validate_token(token, expected_audience)
            return {"active": True, **claims}
        except Exception as err:
            return {"active": False, "error": getattr(err, "code", "error")}

    def public_keys(self) -> dict[str, str]:
        from cryptography.hazmat.primitives import serialization

        with self._key_lock:
            return {
                kid: _b64url(
                    key.public_key.public_bytes(
                        serialization.Encoding.Raw,
                        serialization.PublicFormat.Raw,
                    )
                )
                for kid, key in self._keys.items()
            }
