"""End-to-end user stories, the concurrency drill, and adversarial probes.

Each story is an ordered script of (actor, operation, expected outcome)
steps executed against fresh live service instances; a transcript records
the actual outcome plus the audit events every step emitted. A mismatch
anywhere raises ScenarioFailed.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import sshca, sshwire
from .clock import VirtualClock
from .errors import GatekeepError, ScenarioFailed
from .stack import DemoUser, ServiceStack
from .topology import PrincipalFixture

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

STORY_TITLES = {
    1: "allocation granted, PI invited and registered",
    2: "operations staff admin-only account",
    3: "researcher account setup and revocation",
    4: "SSH access to the AI platform",
    5: "privileged operation on the management plane",
    6: "notebook session through the authenticated tunnel",
}

DAY = 86400.0


@dataclass
class Step:
    actor: str
    operation: str
    expect: str                              # "allow" or an error code
    run: Callable[[dict[str, Any]], Any]
    note: str = ""


@dataclass
class StepResult:
    index: int
    actor: str
    operation: str
    expected: str
    actual: str
    ok: bool
    note: str = ""
    events: list[dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "actor": self.actor,
            "operation": self.operation,
            "expected": self.expected,
            "actual": self.actual,
            "ok": self.ok,
            "note": self.note,
            "events": self.events,
        }


@dataclass
class Transcript:
    story_id: int
    title: str
    steps: list[StepResult]
    ok: bool
    op_count: int
    event_count: int

    def to_json(self) -> dict[str, Any]:
        return {
            "story_id": self.story_id,
            "title": self.title,
            "ok": self.ok,
            "op_count": self.op_count,
            "event_count": self.event_count,
            "steps": [s.to_json() for s in self.steps],
        }


def new_keypair() -> tuple[Ed25519PrivateKey, str]:
    key = Ed25519PrivateKey.generate()
    return key, sshwire.render_openssh_public_key(key.public_key(), "user@laptop")


def run_scenario(story_id: int, stack: Optional[ServiceStack] = None) -> Transcript:
    """Execute one story against fresh module instances."""
    if story_id not in STORY_TITLES:
        raise ValueError(f"unknown story {story_id}")
    if stack is None:
        stack = ServiceStack(clock=VirtualClock()).bootstrap()
    builder = _STORIES[story_id]
    steps = builder(stack)
    ctx: dict[str, Any] = {"stack": stack}
    results: list[StepResult] = []
    for index, step in enumerate(steps):
        before = stack.siem.event_count()
        try:
            step.run(ctx)
            actual = "allow"
        except GatekeepError as err:
            actual = err.code
        except AssertionError as err:
            actual = f"postcondition failed: {err}"
        events = [e.to_json() for e in stack.siem.events()[before:]]
        ok = actual == step.expect
        results.append(StepResult(
            index=index, actor=step.actor, operation=step.operation,
            expected=step.expect, actual=actual, ok=ok, note=step.note,
            events=events,
        ))
        if not ok:
            raise ScenarioFailed(index, step.expect, actual)
    return Transcript(
        story_id=story_id,
        title=STORY_TITLES[story_id],
        steps=results,
        ok=all(r.ok for r in results),
        op_count=stack.op_counter.total,
        event_count=stack.siem.event_count(),
    )


def run_all_scenarios() -> list[Transcript]:
    return [run_scenario(story_id) for story_id in sorted(STORY_TITLES)]


# --- shared setup helpers -------------------------------------------------

def _make_project(stack: ServiceStack, code: str = "camels", days: float = 30.0):
    alice = stack.users["alice"]
    session = stack.login(alice)
    now = stack.clock.now()
    return stack.registry.create_project(
        session, code, f"Project {code}",
        {"gpu_hours": 5000, "storage_gb": 2048},
        starts_at=now, expires_at=now + days * DAY,
    )


def _invite_and_register(
    stack: ServiceStack, inviter_session, email: str, project_id: str,
    role: str, user: DemoUser,
):
    invitation = stack.registry.invite(inviter_session, email, project_id, role)
    user.email = email
    return stack.identity.register_identity(
        stack.assertion_for(user), invitation.token
    )


def _setup_project_with_members(stack: ServiceStack, days: float = 30.0):
    """Project camels with PI pat and researcher rae, both registered."""
    project = _make_project(stack, days=days)
    alice_session = stack.login(stack.users["alice"])
    pat = stack.new_user("pat")
    identity = _invite_and_register(
        stack, alice_session, "pat@uni.example", project.project_id, "pi", pat
    )
    pat.persistent_id = identity.persistent_id
    pat_session = stack.login(pat)
    rae = stack.new_user("rae")
    identity = _invite_and_register(
        stack, pat_session, "rae@example.org", project.project_id,
        "researcher", rae,
    )
    rae.persistent_id = identity.persistent_id
    return project, pat, rae


# --- story scripts ---------------------------------------------------------

def _story_1(stack: ServiceStack) -> list[Step]:
    alice = stack.users["alice"]

    def create_project(ctx):
        session = stack.login(alice)
        ctx["alice_session"] = session
        now = stack.clock.now()
        ctx["project"] = stack.registry.create_project(
            session, "camels", "Camelid genomics",
            {"gpu_hours": 5000, "storage_gb": 2048},
            starts_at=now, expires_at=now + 30 * DAY,
        )

    def register_without_invitation(ctx):
        pete = stack.new_user("pete")
        stack.identity.register_identity(
            stack.assertion_for(pete), "no-such-invitation"
        )

    def invite_pi(ctx):
        ctx["invitation"] = stack.registry.invite(
            ctx["alice_session"], "pat@uni.example",
            ctx["project"].project_id, "pi",
        )

    def register_pi(ctx):
        pat = stack.new_user("pat")
        pat.email = "pat@uni.example"
        identity = stack.identity.register_identity(
            stack.assertion_for(pat), ctx["invitation"].token
        )
        pat.persistent_id = identity.persistent_id
        ctx["pat"] = pat
        assert ctx["invitation"].state == "consumed", "invitation not consumed"
        auth = stack.registry.authorizations_for(identity.persistent_id)
        roles = {b.role for b in auth["bindings"]}
        assert roles == {"pi"}, f"expected a PI binding, got {roles}"

    def pi_logs_in(ctx):
        ctx["pat_session"] = stack.login(ctx["pat"])

    def register_again(ctx):
        stack.identity.register_identity(
            stack.assertion_for(ctx["pat"]), ctx["invitation"].token
        )

    def project_expires(ctx):
        stack.clock.advance(31 * DAY)
        stack.registry.sweep_expiry()
        auth = stack.registry.authorizations_for(ctx["pat"].persistent_id)
        assert auth["active_projects"] == [], "expired project still visible"
        assert auth["bindings"] == [], "bindings survived expiry"

    return [
        Step("alice", "project.create", "allow", create_project,
             note="allocator creates a time- and resource-limited project"),
        Step("pete", "identity.register", "no_matching_authorization",
             register_without_invitation,
             note="registration is led by authorization and fails without it"),
        Step("alice", "project.invite", "allow", invite_pi),
        Step("pat", "identity.register", "allow", register_pi,
             note="federated registration consumes the invitation"),
        Step("pat", "idp.authenticate", "allow", pi_logs_in),
        Step("pat", "identity.register", "already_registered", register_again),
        Step("system", "project.sweep", "allow", project_expires,
             note="expiry removes every trace of the authorization"),
    ]


def _story_2(stack: ServiceStack) -> list[Step]:
    oscar = stack.users["oscar"]

    def login_without_mfa(ctx):
        stack.login(oscar, mfa=False)

    def login_with_mfa(ctx):
        ctx["oscar_session"] = stack.login(oscar, mfa=True)

    def issue_mgmt_token(ctx):
        ctx["mgmt_token"] = stack.tokens.issue_token(
            ctx["oscar_session"], "mgmt:tailnet"
        )

    def federated_user_wants_mgmt(ctx):
        alice_session = stack.login(stack.users["alice"])
        stack.tokens.issue_token(alice_session, "mgmt:tailnet")

    def second_admin_onboarded(ctx):
        omar = stack.new_user("omar", idp_id="cloud-admin", mfa=True)
        identity = stack.admit_identity(omar)
        omar.persistent_id = identity.persistent_id
        stack.registry.grant_role(omar.persistent_id, "admin")
        ctx["omar"] = omar

    def oscar_leaves_group(ctx):
        omar_session = stack.login(ctx["omar"], mfa=True)
        removed = stack.registry.revoke(omar_session, oscar.persistent_id)
        assert removed == 1, f"expected 1 binding removed, got {removed}"

    def old_token_dead(ctx):
        stack.tokens.validate_token(ctx["mgmt_token"], "mgmt:tailnet")

    def no_new_tokens(ctx):
        stack.tokens.issue_token(ctx["oscar_session"], "mgmt:tailnet")

    return [
        Step("oscar", "idp.authenticate", "mfa_required", login_without_mfa,
             note="the admin provider insists on hardware-key MFA"),
        Step("oscar", "idp.authenticate", "allow", login_with_mfa),
        Step("oscar", "token.issue", "allow", issue_mgmt_token),
        Step("alice", "token.issue", "admin_idp_required",
             federated_user_wants_mgmt,
             note="management audiences require the admin provider"),
        Step("system", "admin.onboard", "allow", second_admin_onboarded,
             note="admin onboarding is an out-of-band human check"),
        Step("omar", "project.revoke", "allow", oscar_leaves_group,
             note="access is revoked when an individual leaves the group"),
        Step("oscar", "token.validate", "revoked", old_token_dead),
        Step("oscar", "token.issue", "not_authorized", no_new_tokens),
    ]


def _story_3(stack: ServiceStack) -> list[Step]:
    def setup(ctx):
        project = _make_project(stack)
        ctx["project"] = project
        alice_session = stack.login(stack.users["alice"])
        pat = stack.new_user("pat")
        identity = _invite_and_register(
            stack, alice_session, "pat@uni.example", project.project_id,
            "pi", pat,
        )
        pat.persistent_id = identity.persistent_id
        ctx["pat"] = pat
        ctx["pat_session"] = stack.login(pat)

    def pi_invites_researcher(ctx):
        ctx["invitation"] = stack.registry.invite(
            ctx["pat_session"], "rae@example.org",
            ctx["project"].project_id, "researcher",
        )

    def researcher_registers(ctx):
        rae = stack.new_user("rae")
        identity = stack.identity.register_identity(
            stack.assertion_for(rae), ctx["invitation"].token
        )
        rae.persistent_id = identity.persistent_id
        ctx["rae"] = rae
        ctx["rae_session"] = stack.login(rae)

    def researcher_invites(ctx):
        stack.registry.invite(
            ctx["rae_session"], "friend@example.org",
            ctx["project"].project_id, "researcher",
        )

    def pi_revokes_researcher(ctx):
        removed = stack.registry.revoke(
            ctx["pat_session"], ctx["rae"].persistent_id,
            project_id=ctx["project"].project_id,
        )
        assert removed == 1
        auth = stack.registry.authorizations_for(ctx["rae"].persistent_id)
        assert auth["bindings"] == [], "revocation left a binding behind"

    def no_more_tokens(ctx):
        stack.tokens.issue_token(ctx["rae_session"], "tunnel:jupyter")

    def idp_drops_user(ctx):
        stack.identity.suspend_identity(ctx["rae"].persistent_id)
        stack.login(ctx["rae"])

    return [
        Step("system", "setup", "allow", setup,
             note="project with registered PI, as in story 1"),
        Step("pat", "project.invite", "allow", pi_invites_researcher),
        Step("rae", "identity.register", "allow", researcher_registers,
             note="email invitation leads to account and project"),
        Step("rae", "project.invite", "forbidden", researcher_invites,
             note="a researcher cannot invite other researchers"),
        Step("pat", "project.revoke", "allow", pi_revokes_researcher),
        Step("rae", "token.issue", "not_authorized", no_more_tokens,
             note="revocation removes user authorization"),
        Step("rae", "idp.authenticate", "identity_suspended", idp_drops_user,
             note="authentication fails once the IdP drops the affiliation"),
    ]


def _story_4(stack: ServiceStack) -> list[Step]:
    def setup(ctx):
        project, pat, rae = _setup_project_with_members(stack)
        ctx.update(project=project, pat=pat, rae=rae)
        ctx["key"], ctx["public_key"] = new_keypair()

    def login(ctx):
        ctx["rae_session"] = stack.login(ctx["rae"])

    def provision(ctx):
        account = stack.registry.provision_linux_account(
            ctx["rae"].persistent_id, ctx["project"].project_id
        )
        assert account.username == "camels-0001", account.username
        ctx["account"] = account

    def issue_ca_token(ctx):
        ctx["ca_token"] = stack.tokens.issue_token(ctx["rae_session"], "ssh-ca")

    def sign_key(ctx):
        cert = stack.ca.sign_user_key(ctx["ca_token"], ctx["public_key"])
        assert cert.principals == (ctx["account"].username,), cert.principals
        ctx["cert"] = cert

    def render_config(ctx):
        auth = stack.registry.authorizations_for(ctx["rae"].persistent_id)
        accounts = {
            p.code: a.username
            for p in auth["active_projects"]
            for a in auth["linux_accounts"]
            if a.project_id == p.project_id
        }
        text = sshca.render_ssh_config(
            ctx["cert"], auth["active_projects"], accounts,
            stack.bastion_address, stack.cluster_domain,
        )
        assert f"Host camels.{stack.cluster_domain}" in text
        assert "User camels-0001" in text
        assert f"ProxyJump {stack.bastion_address}" in text
        ctx["ssh_config"] = text

    def open_session(ctx):
        session = stack.gateway.open_bastion_session(
            ctx["cert"].blob, ctx["account"].username, "login-aip1"
        )
        assert session.target == "login-aip1"

    def cert_expires(ctx):
        stack.clock.advance(9 * 3600.0)
        stack.gateway.open_bastion_session(
            ctx["cert"].blob, ctx["account"].username, "login-aip1"
        )

    def fresh_certificate(ctx):
        session = stack.login(ctx["rae"])
        token = stack.tokens.issue_token(session, "ssh-ca")
        cert = stack.ca.sign_user_key(token, ctx["public_key"])
        stack.gateway.open_bastion_session(
            cert.blob, ctx["account"].username, "login-aip1"
        )

    return [
        Step("system", "setup", "allow", setup),
        Step("rae", "idp.authenticate", "allow", login),
        Step("rae", "account.provision", "allow", provision,
             note="a unique UNIX username per user per project"),
        Step("rae", "token.issue", "allow", issue_ca_token),
        Step("rae", "cert.sign", "allow", sign_key,
             note="principals are exactly the per-project accounts"),
        Step("rae", "ssh.render_config", "allow", render_config,
             note="aliases make the jump host transparent"),
        Step("rae", "bastion.open", "allow", open_session),
        Step("rae", "bastion.open", "certificate_rejected", cert_expires,
             note="certificates outlive nothing: short TTL, then re-issue"),
        Step("rae", "bastion.open", "allow", fresh_certificate),
    ]


def _story_5(stack: ServiceStack) -> list[Step]:
    oscar = stack.users["oscar"]

    def setup(ctx):
        project, pat, rae = _setup_project_with_members(stack)
        ctx.update(project=project, rae=rae)
        ctx["rae_session"] = stack.login(rae)
        stack.registry.provision_linux_account(
            rae.persistent_id, project.project_id
        )
        key, public = new_keypair()
        token = stack.tokens.issue_token(ctx["rae_session"], "ssh-ca")
        ctx["rae_cert"] = stack.ca.sign_user_key(token, public)

    def admin_login(ctx):
        ctx["oscar_session"] = stack.login(oscar, mfa=True)

    def admin_token(ctx):
        ctx["mgmt_token"] = stack.tokens.issue_token(
            ctx["oscar_session"], "mgmt:tailnet"
        )

    def open_mgmt(ctx):
        session = stack.mgmt_gateway.open_admin_session(
            ctx["mgmt_token"], "mgmt-node"
        )
        assert session.target == "mgmt-node"

    def user_token_on_tailnet(ctx):
        user_token = stack.tokens.issue_token(ctx["rae_session"], "tunnel:jupyter")
        stack.mgmt_gateway.open_admin_session(user_token, "mgmt-node")

    def user_bastion_to_mgmt(ctx):
        principal = ctx["rae_cert"].principals[0]
        stack.gateway.open_bastion_session(
            ctx["rae_cert"].blob, principal, "mgmt-node"
        )

    return [
        Step("system", "setup", "allow", setup),
        Step("oscar", "idp.authenticate", "allow", admin_login),
        Step("oscar", "token.issue", "allow", admin_token),
        Step("oscar", "mgmt.open", "allow", open_mgmt,
             note="management plane behind its own admin-only ingress"),
        Step("rae", "mgmt.open", "token_invalid", user_token_on_tailnet,
             note="user-plane tokens mean nothing on the tailnet"),
        Step("rae", "bastion.open", "unknown_target", user_bastion_to_mgmt,
             note="the user bastion cannot even name management nodes"),
    ]


def _story_6(stack: ServiceStack) -> list[Step]:
    def setup(ctx):
        project, pat, rae = _setup_project_with_members(stack)
        ctx.update(project=project, rae=rae)

    def anonymous_request(ctx):
        before = len(stack.jupyter.invocations)
        try:
            stack.gateway.route_web_request("/jupyter", None, source="outsider")
        finally:
            assert len(stack.jupyter.invocations) == before, (
                "unauthenticated request reached the backend"
            )

    def login(ctx):
        ctx["rae_session"] = stack.login(ctx["rae"])

    def issue_token(ctx):
        ctx["web_token"] = stack.tokens.issue_token(
            ctx["rae_session"], "tunnel:jupyter"
        )

    def open_notebook(ctx):
        before_spawns = len(stack.jupyter.spawned)
        response = stack.gateway.route_web_request(
            "/jupyter", ctx["web_token"], source=ctx["rae"].name
        )
        assert response["status"] == 200, response
        assert response["body"]["spawned"] is True
        assert response["body"]["user"] == ctx["rae"].persistent_id
        assert len(stack.jupyter.spawned) == before_spawns + 1
        last = stack.jupyter.invocations[-1]
        assert last["claims"] is not None, "backend saw no validated claims"
        assert last["claims"]["sub"] == ctx["rae"].persistent_id

    return [
        Step("system", "setup", "allow", setup),
        Step("anonymous", "tunnel.route", "unauthenticated", anonymous_request,
             note="no token, no backend contact"),
        Step("rae", "idp.authenticate", "allow", login),
        Step("rae", "token.issue", "allow", issue_token),
        Step("rae", "tunnel.route", "allow", open_notebook,
             note="backend re-validates the forwarded token, then spawns"),
    ]


_STORIES: dict[int, Callable[[ServiceStack], list[Step]]] = {
    1: _story_1,
    2: _story_2,
    3: _story_3,
    4: _story_4,
    5: _story_5,
    6: _story_6,
}


# --- concurrency drill ------------------------------------------------------

@dataclass
class SessionFlowResult:
    user: str
    persistent_id: str
    ok: bool
    error: str = ""
    response: dict[str, Any] = field(default_factory=dict)
    transcript: str = ""
    started: float = 0.0               # wall-clock, relative to drill start
    finished: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "user": self.user,
            "persistent_id": self.persistent_id,
            "ok": self.ok,
            "error": self.error,
            "response": self.response,
            "started": self.started,
            "finished": self.finished,
        }


def run_stress(sessions: int = 45, stack: Optional[ServiceStack] = None) -> list[SessionFlowResult]:
    """Concurrent login -> token -> tunnel -> spawn flows, one per trainee.

    Every trainee is a real registered researcher; the flows run in
    parallel threads against one live stack.
    """
    if stack is None:
        stack = ServiceStack(clock=VirtualClock(), rate_limit=1000.0).bootstrap()
    project = _make_project(stack, code="workshop")
    alice_session = stack.login(stack.users["alice"])
    pat = stack.new_user("pat")
    identity = _invite_and_register(
        stack, alice_session, "pat@uni.example", project.project_id, "pi", pat
    )
    pat.persistent_id = identity.persistent_id
    pat_session = stack.login(pat)

    trainees: list[DemoUser] = []
    for i in range(sessions):
        user = stack.new_user(f"trainee{i:02d}")
        identity = _invite_and_register(
            stack, pat_session, f"trainee{i:02d}@example.org",
            project.project_id, "researcher", user,
        )
        user.persistent_id = identity.persistent_id
        trainees.append(user)

    results: list[Optional[SessionFlowResult]] = [None] * sessions
    barrier = threading.Barrier(sessions)
    epoch = time.monotonic()

    def flow(index: int, user: DemoUser) -> None:
        transcript_parts: list[str] = []
        started = 0.0
        try:
            barrier.wait(timeout=30)
            started = time.monotonic() - epoch
            session = stack.login(user)
            transcript_parts.append(f"session={session.session_id}")
            token = stack.tokens.issue_token(session, "tunnel:jupyter")
            transcript_parts.append(f"token={token}")
            response = stack.gateway.route_web_request(
                "/jupyter", token, source=user.name
            )
            transcript_parts.append(f"response={response}")
            ok = (
                response["status"] == 200
                and response["body"]["spawned"] is True
                and response["body"]["user"] == user.persistent_id
            )
            results[index] = SessionFlowResult(
                user=user.name,
                persistent_id=user.persistent_id,
                ok=ok,
                response=response,
                transcript=" ".join(transcript_parts),
                started=started,
                finished=time.monotonic() - epoch,
            )
        except Exception as err:           # noqa: BLE001 - recorded per flow
            results[index] = SessionFlowResult(
                user=user.name,
                persistent_id=user.persistent_id,
                ok=False,
                error=repr(err),
                transcript=" ".join(transcript_parts),
                started=started,
                finished=time.monotonic() - epoch,
            )

    threads = [
        threading.Thread(target=flow, args=(i, user), daemon=True)
        for i, user in enumerate(trainees)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=60)
    return [r for r in results if r is not None]


def cross_session_leaks(results: list[SessionFlowResult]) -> list[tuple[str, str]]:
    """Pairs (session user, foreign pid) wherever a transcript mentions
    another session's persistent id."""
    leaks = []
    for result in results:
        for other in results:
            if other.user == result.user:
                continue
            if other.persistent_id and other.persistent_id in result.transcript:
                leaks.append((result.user, other.persistent_id))
    return leaks


# --- matrix fixture ----------------------------------------------------------

def build_matrix_fixture(
    stack: Optional[ServiceStack] = None,
) -> tuple[ServiceStack, list[PrincipalFixture]]:
    """The four canonical principals the hand-derived matrix covers.

    researcher: certificate plus a notebook-tunnel token
    pi:         notebook-tunnel token only (never provisioned an account)
    admin:      management tailnet token, rooted in the admin IdP
    """
    if stack is None:
        stack = ServiceStack(clock=VirtualClock()).bootstrap()
    project, pat, rae = _setup_project_with_members(stack)
    rae_session = stack.login(rae)
    account = stack.registry.provision_linux_account(
        rae.persistent_id, project.project_id
    )
    _, public = new_keypair()
    ca_token = stack.tokens.issue_token(rae_session, "ssh-ca")
    cert = stack.ca.sign_user_key(ca_token, public)
    rae_tunnel = stack.tokens.issue_token(rae_session, "tunnel:jupyter")

    pat_session = stack.login(pat)
    pat_tunnel = stack.tokens.issue_token(pat_session, "tunnel:jupyter")

    oscar_session = stack.login(stack.users["oscar"], mfa=True)
    mgmt_token = stack.tokens.issue_token(oscar_session, "mgmt:tailnet")

    principals = [
        PrincipalFixture(name="anonymous"),
        PrincipalFixture(
            name="researcher",
            tokens=[rae_tunnel],
            certificates=[(cert.blob, account.username)],
        ),
        PrincipalFixture(name="pi", tokens=[pat_tunnel]),
        PrincipalFixture(name="admin", tokens=[mgmt_token]),
    ]
    return stack, principals


# --- adversarial probes -----------------------------------------------------

def adversarial_principals(
    stack: ServiceStack, rng: random.Random, count: int = 100
) -> list[PrincipalFixture]:
    """Random principals holding manipulated credentials: forged signatures,
    expired or wrong-audience tokens, certificates with unlisted principals,
    revoked sessions. None of them may widen access beyond the matrix."""
    project, pat, rae = _setup_project_with_members(stack)
    rae_session = stack.login(rae)
    account = stack.registry.provision_linux_account(
        rae.persistent_id, project.project_id
    )
    key, public = new_keypair()
    ca_token = stack.tokens.issue_token(rae_session, "ssh-ca")
    good_cert = stack.ca.sign_user_key(ca_token, public)

    oscar_session = stack.login(stack.users["oscar"], mfa=True)

    forged_key = Ed25519PrivateKey.generate()

    def forged_token(audience: str) -> str:
        from .tokens import SigningKeypair, encode_token

        now = stack.clock.now()
        claims = {
            "jti": f"forged-{rng.randrange(1 << 30):x}",
            "sub": rae.persistent_id,
            "sid": "forged-session",
            "role": "admin",
            "aud": audience,
            "iat": now,
            "exp": now + 3600.0,
        }
        fake = SigningKeypair("k-forged", forged_key, now)
        return encode_token(claims, fake)

    def forged_cert(principal: str) -> bytes:
        return sshwire.build_certificate(
            nonce=b"0" * 32,
            user_key=key.public_key(),
            serial=999999,
            key_id=rae.persistent_id,
            principals=[principal],
            valid_after=int(stack.clock.now()) - 10,
            valid_before=int(stack.clock.now()) + 86400,
            ca_key=forged_key,
        )

    def expired_token(audience: str) -> str:
        # Issued honestly but already past its lifetime.
        session = stack.login(rae)
        token = stack.tokens.issue_token(session, audience, ttl=0.0)
        return token

    def revoked_token(audience: str) -> str:
        session = stack.login(rae)
        token = stack.tokens.issue_token(session, audience)
        stack.tokens.revoke_session(session, session.session_id)
        return token

    principals: list[PrincipalFixture] = []
    for index in range(count):
        name = f"adversary-{index:03d}"
        tokens: list[str] = []
        certificates: list[tuple[bytes, str]] = []
        moves = rng.sample([
            "forged-mgmt-token",
            "forged-tunnel-token",
            "wrong-audience-token",
            "expired-token",
            "revoked-token",
            "forged-cert",
            "unlisted-principal-cert",
            "valid-user-token",
            "valid-cert",
        ], k=rng.randint(1, 4))
        for move in moves:
            if move == "forged-mgmt-token":
                tokens.append(forged_token("mgmt:tailnet"))
            elif move == "forged-tunnel-token":
                tokens.append(forged_token("tunnel:jupyter"))
            elif move == "wrong-audience-token":
                session = stack.login(rae)
                tokens.append(stack.tokens.issue_token(session, "ssh-ca"))
            elif move == "expired-token":
                tokens.append(expired_token("tunnel:jupyter"))
            elif move == "revoked-token":
                tokens.append(revoked_token("tunnel:jupyter"))
            elif move == "forged-cert":
                certificates.append((forged_cert(account.username), account.username))
            elif move == "unlisted-principal-cert":
                certificates.append((good_cert.blob, "root"))
            elif move == "valid-user-token":
                session = stack.login(rae)
                tokens.append(stack.tokens.issue_token(session, "tunnel:jupyter"))
            elif move == "valid-cert":
                certificates.append((good_cert.blob, account.username))
        principals.append(PrincipalFixture(
            name=name, tokens=tokens, certificates=certificates,
        ))
    # One honest admin principal rides along as the only legitimate
    # management-plane reacher.
    principals.append(PrincipalFixture(
        name="honest-admin",
        tokens=[stack.tokens.issue_token(oscar_session, "mgmt:tailnet")],
    ))
    return principals
