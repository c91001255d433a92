"""SSH certificate authority and client-config rendering.

Signs user public keys into time-limited certificates whose principals are
exactly the user's per-project Linux accounts at issuance time. There is no
mid-life revocation: enforcement is the short TTL plus re-checks at the
next issuance and the bastion kill switch.
"""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import sshwire
from .audit import AuditedService, AuditEvent, decision_op
from .clock import Clock
from .errors import (
    GatekeepError,
    MalformedKey,
    NoActiveProjects,
    NoProjects,
    TokenInvalid,
)

DEFAULT_CERT_TTL = 8 * 3600.0       # one working day of access per signature
MANAGED_BLOCK_BEGIN = "# BEGIN gatekeep"
MANAGED_BLOCK_END = "# END gatekeep"

# Deliberately minimal: enough for interactive login, nothing more.
DEFAULT_EXTENSIONS = {"permit-pty": ""}


@dataclass(frozen=True)
class SshCertificate:
    serial: int
    key_id: str                      # subject's persistent id
    principals: tuple[str, ...]
    valid_after: float
    valid_before: float
    blob: bytes                      # raw OpenSSH certificate
    file_text: str                   # on-disk OpenSSH form

    def to_json(self) -> dict[str, Any]:
        return {
            "serial": self.serial,
            "key_id": self.key_id,
            "principals": list(self.principals),
            "valid_after": self.valid_after,
            "valid_before": self.valid_before,
            "certificate": self.file_text,
        }


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""                 # BadSignature | NotYetValid | Expired |
                                     # PrincipalNotListed, empty when accepted


class CertificateAuthority(AuditedService):
    source_domain = "FDS"

    def __init__(
        self,
        clock: Clock,
        audit_sink: Callable[[AuditEvent], None],
        tokens,                      # TokenService
        registry,                    # ProjectRegistry
        cert_ttl: float = DEFAULT_CERT_TTL,
        max_cert_ttl: float = DEFAULT_CERT_TTL,
    ):
        super().__init__(clock, audit_sink)
        self.tokens = tokens
        self.registry = registry
        self.cert_ttl = min(cert_ttl, max_cert_ttl)
        self.max_cert_ttl = max_cert_ttl
        self._key = Ed25519PrivateKey.generate()
        self._serial = 0
        self._serial_lock = threading.Lock()

    # --- CA key publication ---

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()

    def ca_public_key_line(self) -> str:
        return sshwire.render_openssh_public_key(self.public_key, "gatekeep-ca")

    # --- signing ---

    @decision_op("cert.sign")
    def sign_user_key(self, access_token: str, user_public_key: str) -> SshCertificate:
        """Sign a user key for every provisioned account on active projects."""
        actor = "anonymous"
        try:
            try:
                claims = self.tokens.validate_token(access_token, "ssh-ca")
            except GatekeepError as err:
                raise TokenInvalid(err.code)
            actor = claims["sub"]
            key, _comment = sshwire.parse_openssh_public_key(user_public_key)
            auth = self.registry.authorizations_for(claims["sub"])
            accounts = auth["linux_accounts"]
            if not accounts:
                raise NoActiveProjects(claims["sub"])
            principals = tuple(a.username for a in accounts)
            now = self.clock.now()
            with self._serial_lock:
                self._serial += 1
                serial = self._serial
            valid_after = now
            valid_before = now + self.cert_ttl
            blob = sshwire.build_certificate(
                nonce=secrets.token_bytes(32),
                user_key=key,
                serial=serial,
                key_id=claims["sub"],
                principals=list(principals),
                valid_after=int(valid_after),
                valid_before=int(valid_before),
                ca_key=self._key,
                extensions=dict(DEFAULT_EXTENSIONS),
            )
            cert = SshCertificate(
                serial=serial,
                key_id=claims["sub"],
                principals=principals,
                valid_after=valid_after,
                valid_before=valid_before,
                blob=blob,
                file_text=sshwire.render_certificate_file(
                    blob, comment=claims["sub"]
                ),
            )
        except Exception as err:
            raise self._deny("cert.sign", err, actor)
        self._emit("cert.sign", "allow", actor, serial=str(serial),
                   principals=",".join(principals))
        return cert


def verify_certificate(
    cert_blob: bytes,
    presented_principal: str,
    now: float,
    ca_public_key: Ed25519PublicKey,
) -> Verdict:
    """Login-node-side check; pure function of its arguments.

    Accept iff the CA signature verifies, valid_after <= now < valid_before,
    and the presented principal is listed. A principal whose project was
    revoked after issuance still passes until the certificate expires;
    revocation takes effect at the next issuance.
    """
    try:
        parsed = sshwire.parse_certificate(cert_blob)
    except MalformedKey:
        return Verdict(False, "BadSignature")
    from cryptography.hazmat.primitives import serialization

    expected = ca_public_key.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    embedded = parsed.ca_public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    if embedded != expected:
        return Verdict(False, "BadSignature")
    try:
        ca_public_key.verify(parsed.signature, parsed.signed_section)
    except Exception:
        return Verdict(False, "BadSignature")
    if now < parsed.valid_after:
        return Verdict(False, "NotYetValid")
    if now >= parsed.valid_before:
        return Verdict(False, "Expired")
    if presented_principal not in parsed.principals:
        return Verdict(False, "PrincipalNotListed")
    return Verdict(True)


def render_ssh_config(
    cert: SshCertificate,
    projects: list,                    # Project records with .code
    accounts: dict[str, str],          # project code -> linux username
    jump_host_address: str,
    cluster_domain: str,
    identity_file: Optional[str] = None,
) -> str:
    """One Host alias per project, all hopping through the bastion.

    Output is delimited by managed-block markers so re-rendering replaces
    the block instead of appending; rendering twice is a no-op.
    """
    if not projects:
        raise NoProjects("certificate covers no projects")
    lines = [MANAGED_BLOCK_BEGIN]
    for project in sorted(projects, key=lambda p: p.code):
        username = accounts.get(project.code)
        if username is None:
            continue
        lines.append(f"Host {project.code}.{cluster_domain}")
        lines.append(f"    User {username}")
        lines.append(f"    ProxyJump {jump_host_address}")
        if identity_file:
            lines.append(f"    IdentityFile {identity_file}")
            lines.append(f"    CertificateFile {identity_file}-cert.pub")
    lines.append(MANAGED_BLOCK_END)
    if len(lines) == 2:
        raise NoProjects("no provisioned accounts to render")
    return "\n".join(lines) + "\n"


def upsert_managed_block(existing_text: str, block: str) -> str:
    """Replace the managed block in an ssh config, or append it."""
    begin = existing_text.find(MANAGED_BLOCK_BEGIN)
    end = existing_text.find(MANAGED_BLOCK_END)
    if begin != -1 and end != -1:
        end += len(MANAGED_BLOCK_END)
        while end < len(existing_text) and existing_text[end] == "\n":
            end += 1
        prefix = existing_text[:begin]
        suffix = existing_text[end:]
        return prefix + block + suffix
    if existing_text and not existing_text.endswith("\n"):
        existing_text += "\n"
    return existing_text + block
