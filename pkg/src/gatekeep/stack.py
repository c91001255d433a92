"""One wired instance of the whole control plane.

Builds every service against a shared clock and audit bus, loads the
default provider/identity fixture, registers the demo tunnel, and exposes
the helpers scenarios and tests use to act as specific people.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .audit import OpCounter, SecurityCenter, AlertRule
from .clock import Clock, VirtualClock
from .gateway import AccessGateway, JupyterStub, ManagementGateway
from .identity import (
    AuthSession,
    FederatedIdentity,
    IdentityBroker,
    IdentityProvider,
    IdPAssertion,
    IdPKind,
    sign_assertion,
)
from .registry import ProjectRegistry
from .sshca import CertificateAuthority
from .tokens import TokenService

CLUSTER_DOMAIN = "aip1.example"
BASTION_ADDRESS = "bastion.example"
LOGIN_NODES = ["login-aip1", "login-i3"]
MANAGEMENT_NODES = ["mgmt-node"]

DEFAULT_ALERT_RULES = [
    AlertRule(
        rule_id="auth-failure-burst",
        action_pattern="idp.authenticate",
        outcome="deny",
        window_seconds=300.0,
        threshold=5,
        group_by="actor",
    ),
    AlertRule(
        rule_id="validation-failure-burst",
        action_pattern="token.validate",
        outcome="deny",
        window_seconds=300.0,
        threshold=20,
        group_by="actor",
    ),
]


@dataclass
class DemoUser:
    name: str
    email: str
    idp_id: str
    subject: str
    mfa: bool = False
    persistent_id: str = ""


class ServiceStack:
    def __init__(
        self,
        state_dir: Optional[str | Path] = None,
        clock: Optional[Clock] = None,
        rate_limit: float = 30.0,
        session_ttl: float = 600.0,
    ):
        if state_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="gatekeep-")
            state_dir = self._tmp.name
        self.state_dir = Path(state_dir)
        self.clock = clock or VirtualClock()
        self.siem = SecurityCenter(
            self.state_dir / "sec", self.clock, rules=list(DEFAULT_ALERT_RULES)
        )
        self.op_counter = OpCounter()
        emit = self.siem.emit
        self.registry = ProjectRegistry(
            self.clock, emit, outbox_path=self.state_dir / "outbox.jsonl"
        )
        self.identity = IdentityBroker(
            self.clock, emit, self.registry, session_ttl=session_ttl
        )
        self.tokens = TokenService(self.clock, emit, self.identity, self.registry)
        self.ca = CertificateAuthority(self.clock, emit, self.tokens, self.registry)
        self.gateway = AccessGateway(
            self.clock, emit, self.tokens, self.ca,
            login_nodes=list(LOGIN_NODES), rate_limit=rate_limit,
        )
        self.mgmt_gateway = ManagementGateway(
            self.clock, emit, self.tokens, self.gateway.killswitches,
            management_nodes=list(MANAGEMENT_NODES),
        )
        self.tokens.killswitch_hook = self.gateway.killswitch_blocks
        for service in (
            self.registry, self.identity, self.tokens, self.ca,
            self.gateway, self.mgmt_gateway,
        ):
            service.op_counter = self.op_counter
        self.jupyter = JupyterStub(self.tokens.introspect, "tunnel:jupyter")
        self.cluster_domain = CLUSTER_DOMAIN
        self.bastion_address = BASTION_ADDRESS
        self.users: dict[str, DemoUser] = {}
        self._idp_secrets: dict[str, bytes] = {}

    # --- fixture ---

    def bootstrap(self) -> "ServiceStack":
        """Default providers, out-of-band-vetted staff, and the demo tunnel."""
        self._idp_secrets = {
            "myaccess": b"fixture-secret-myaccess",
            "last-resort": b"fixture-secret-last-resort",
            "cloud-admin": b"fixture-secret-cloud-admin",
        }
        self.identity.add_idp(IdentityProvider(
            idp_id="myaccess", kind=IdPKind.FEDERATED, assurance="medium",
            mfa_required=False,
            display_name="University Login (Federation)",
            secret=self._idp_secrets["myaccess"],
        ))
        self.identity.add_idp(IdentityProvider(
            idp_id="last-resort", kind=IdPKind.LAST_RESORT, assurance="low",
            mfa_required=False,
            display_name="Managed Login (Last Resort)",
            secret=self._idp_secrets["last-resort"],
        ))
        self.identity.add_idp(IdentityProvider(
            idp_id="cloud-admin", kind=IdPKind.ADMIN, assurance="high",
            mfa_required=True,
            display_name="Operator Login (Admin)",
            secret=self._idp_secrets["cloud-admin"],
        ))

        # Staff identities exist before any project does; their vetting is
        # the out-of-band human check, not a project invitation.
        alice = DemoUser("alice", "alice@funder.example", "myaccess", "alice-subj")
        oscar = DemoUser("oscar", "oscar@brics.example", "cloud-admin",
                         "oscar-subj", mfa=True)
        for user in (alice, oscar):
            identity = self.admit_identity(user)
            user.persistent_id = identity.persistent_id
            self.users[user.name] = user
        self.registry.grant_role(alice.persistent_id, "allocator")
        self.registry.grant_role(oscar.persistent_id, "admin")

        # The MDC-side tunnel client connects out and registers its path.
        tunnel_token = self.tokens.issue_service_token("zenith-mdc-1", "tunnel-admin")
        self.gateway.register_tunnel(
            tunnel_token, "/jupyter", "zenith-mdc-1", self.jupyter.handle
        )

        # Assertion fixtures on disk, one JSON file per assertion.
        fixture_dir = self.state_dir / "assertions"
        for user in (alice, oscar):
            self.identity.write_assertion_fixture(
                fixture_dir, user.name, self.assertion_for(user)
            )
        return self

    def admit_identity(self, user: DemoUser) -> FederatedIdentity:
        """Direct admission, bootstrap only; everyone else registers via
        invitation (authorization-led)."""
        return self.identity.admit_identity(user.idp_id, user.subject, user.email)

    # --- acting as people ---

    def assertion_for(
        self, user: DemoUser, mfa: Optional[bool] = None,
        issued_at: Optional[float] = None,
    ) -> IdPAssertion:
        assertion = IdPAssertion(
            idp_id=user.idp_id,
            subject=user.subject,
            email=user.email,
            mfa_satisfied=user.mfa if mfa is None else mfa,
            issued_at=self.clock.now() if issued_at is None else issued_at,
        )
        return sign_assertion(assertion, self._idp_secrets[user.idp_id])

    def login(self, user: DemoUser, mfa: Optional[bool] = None) -> AuthSession:
        return self.identity.authenticate(user.idp_id, self.assertion_for(user, mfa))

    def new_user(
        self, name: str, idp_id: str = "myaccess", mfa: bool = False
    ) -> DemoUser:
        user = DemoUser(
            name=name,
            email=f"{name}@example.org",
            idp_id=idp_id,
            subject=f"{name}-subj",
            mfa=mfa,
        )
        self.users[name] = user
        return user

    def evaluate_alerts(self):
        return self.siem.evaluate_alert_rules()
