"""Project registry: allocations, role bindings, invitations, Linux accounts.

Holds the authorization truth the rest of the plane consults. Projects are
time- and resource-limited; expiry is enforced by an on-demand sweep plus
lazily at every authorization read, so tests never need a timer. Member
revocation notifies the token service so downstream validation fails on
the very next attempt.
"""

from __future__ import annotations

import json
import logging
import re
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .audit import AuditedService, AuditEvent, decision_op
from .clock import Clock
from .errors import (
    AlreadyConsumed,
    DuplicateCode,
    Forbidden,
    InvalidCode,
    InvalidWindow,
    InvitationExpired,
    NoMatchingAuthorization,
    NotAuthorized,
    NothingToRevoke,
    ProjectInactive,
    RoleNotInvitable,
    UnknownToken,
)

logger = logging.getLogger("gatekeep.registry")

DEFAULT_INVITATION_TTL = 14 * 86400.0
ADMIN_HEADCOUNT_SOFT_LIMIT = 20

ROLES = ("allocator", "pi", "researcher", "admin")
PROJECT_ROLES = ("pi", "researcher")

_CODE_RE = re.compile(r"^[a-z][a-z0-9-]{0,15}$")

# Static role lattice: which actions each role may perform. The observed
# allow/deny behaviour must equal this table exactly (brute-force oracle in
# the harness) and the portal renders affordances straight from it.
PERMISSION_MATRIX: dict[str, list[str]] = {
    "allocator": [
        "project.create",
        "project.invite_pi",
        "project.revoke_member",
        "project.revoke_researcher",
    ],
    "pi": [
        "project.invite_researcher",
        "project.revoke_researcher",
        "account.provision",
    ],
    "researcher": ["account.provision"],
    "admin": ["killswitch.set", "token.rotate", "session.revoke_any"],
}


@dataclass
class Project:
    project_id: str
    code: str
    title: str
    allocation: dict[str, int]          # gpu_hours, storage_gb
    starts_at: float
    expires_at: float
    state: str = "active"               # active | expired | revoked


@dataclass(frozen=True)
class RoleBinding:
    persistent_id: str
    role: str
    project_id: Optional[str]           # required for pi/researcher only
    granted_at: float
    expires_at: Optional[float] = None

    def __post_init__(self) -> None:
        if (self.role in PROJECT_ROLES) != (self.project_id is not None):
            raise ValueError("project_id present iff role is pi/researcher")


@dataclass
class Invitation:
    token: str
    email: str
    project_id: str
    role: str                           # pi | researcher
    invited_by: str
    expires_at: float
    state: str = "pending"              # pending | consumed | expired | cancelled


@dataclass(frozen=True)
class LinuxAccount:
    username: str
    persistent_id: str
    project_id: str
    created_at: float


class ProjectRegistry(AuditedService):
    source_domain = "FDS"

    def __init__(
        self,
        clock: Clock,
        audit_sink: Callable[[AuditEvent], None],
        outbox_path: str | Path | None = None,
        invitation_ttl: float = DEFAULT_INVITATION_TTL,
    ):
        super().__init__(clock, audit_sink)
        self.invitation_ttl = invitation_ttl
        self.outbox_path = Path(outbox_path) if outbox_path else None
        self._projects: dict[str, Project] = {}
        self._codes: dict[str, str] = {}
        self._bindings: list[RoleBinding] = []
        self._by_pid: dict[str, list[RoleBinding]] = {}
        self._invitations: dict[str, Invitation] = {}
        self._accounts: dict[tuple[str, str], LinuxAccount] = {}
        self._usernames: set[str] = set()
        self._account_seq: dict[str, int] = {}
        self._lock = threading.RLock()
        # Called with (persistent_id, project_id or None) when authorization
        # is withdrawn, so live tokens die before their natural expiry.
        self.revocation_listeners: list[Callable[[str, Optional[str]], None]] = []

    # --- role queries ---

    def _add_binding(self, binding: RoleBinding) -> None:
        self._bindings.append(binding)
        self._by_pid.setdefault(binding.persistent_id, []).append(binding)

    def _remove_binding(self, binding: RoleBinding) -> None:
        self._bindings.remove(binding)
        per_user = self._by_pid.get(binding.persistent_id, [])
        per_user.remove(binding)
        if not per_user:
            self._by_pid.pop(binding.persistent_id, None)

    def roles_of(self, persistent_id: str) -> list[RoleBinding]:
        now = self.clock.now()
        with self._lock:
            self._sweep_locked(now)
            return [
                b for b in self._by_pid.get(persistent_id, [])
                if b.expires_at is None or now < b.expires_at
            ]

    def has_role(
        self, persistent_id: str, role: str, project_id: Optional[str] = None
    ) -> bool:
        for binding in self.roles_of(persistent_id):
            if binding.role != role:
                continue
            if role in PROJECT_ROLES:
                project = self._projects.get(binding.project_id or "")
                if project is None or project.state != "active":
                    continue
                if project_id is not None and binding.project_id != project_id:
                    continue
            return True
        return False

    def grant_role(
        self,
        persistent_id: str,
        role: str,
        project_id: Optional[str] = None,
        expires_at: Optional[float] = None,
    ) -> RoleBinding:
        """Bootstrap-level grant: allocator/admin onboarding happens out of
        band of project invitations (the human check of admin enrolment)."""
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        binding = RoleBinding(
            persistent_id=persistent_id,
            role=role,
            project_id=project_id,
            granted_at=self.clock.now(),
            expires_at=expires_at,
        )
        with self._lock:
            self._add_binding(binding)
            if role == "admin":
                headcount = len(
                    {b.persistent_id for b in self._bindings if b.role == "admin"}
                )
                if headcount > ADMIN_HEADCOUNT_SOFT_LIMIT:
                    logger.warning(
                        "admin headcount %d exceeds the expected ~%d",
                        headcount, ADMIN_HEADCOUNT_SOFT_LIMIT,
                    )
        return binding

    # --- projects ---

    @decision_op("project.create")
    def create_project(
        self,
        actor_session,
        code: str,
        title: str,
        allocation: dict[str, int],
        starts_at: float,
        expires_at: float,
    ) -> Project:
        actor = actor_session.persistent_id
        try:
            if not self.has_role(actor, "allocator"):
                raise Forbidden("allocator role required")
            if not _CODE_RE.match(code or ""):
                raise InvalidCode(code)
            if expires_at <= starts_at:
                raise InvalidWindow(f"{expires_at} <= {starts_at}")
            if any(v < 0 for v in allocation.values()):
                raise InvalidWindow("allocation quantities must be non-negative")
            with self._lock:
                if code in self._codes:
                    raise DuplicateCode(code)
                project = Project(
                    project_id=f"prj-{secrets.token_hex(6)}",
                    code=code,
                    title=title,
                    allocation=dict(allocation),
                    starts_at=starts_at,
                    expires_at=expires_at,
                )
                self._projects[project.project_id] = project
                self._codes[code] = project.project_id
        except Exception as err:
            raise self._deny("project.create", err, actor, code=code)
        self._emit("project.create", "allow", actor, project=project.project_id,
                   code=code)
        return project

    def get_project(self, project_id: str) -> Project:
        with self._lock:
            project = self._projects.get(project_id)
        if project is None:
            raise NotAuthorized(f"unknown project {project_id}")
        return project

    def project_by_code(self, code: str) -> Project:
        with self._lock:
            project_id = self._codes.get(code)
        if project_id is None:
            raise NotAuthorized(f"unknown project code {code}")
        return self.get_project(project_id)

    def _active_project(self, project_id: str, now: float) -> Project:
        project = self.get_project(project_id)
        if project.state != "active" or now >= project.expires_at:
            raise ProjectInactive(project_id)
        return project

    # --- invitations ---

    @decision_op("project.invite")
    def invite(
        self, actor_session, email: str, project_id: str, role: str
    ) -> Invitation:
        actor = actor_session.persistent_id
        try:
            now = self.clock.now()
            actor_roles = {b.role for b in self.roles_of(actor)}
            if "researcher" in actor_roles and not (
                actor_roles & {"allocator", "pi"}
            ):
                raise Forbidden("researchers cannot invite")
            # Expiry already swept the project's bindings away, so check the
            # project state before roles: an ex-PI reads ProjectInactive.
            self._active_project(project_id, now)
            if self.has_role(actor, "allocator"):
                invitable = {"pi"}
            elif self.has_role(actor, "pi", project_id):
                invitable = {"researcher"}
            else:
                raise Forbidden("allocator or project PI required")
            if role not in invitable:
                raise RoleNotInvitable(f"{sorted(actor_roles)} cannot invite {role}")
            invitation = Invitation(
                token=secrets.token_urlsafe(24),
                email=email.strip().casefold(),
                project_id=project_id,
                role=role,
                invited_by=actor,
                expires_at=now + self.invitation_ttl,
            )
            with self._lock:
                self._invitations[invitation.token] = invitation
            self._notify(invitation)
        except Exception as err:
            raise self._deny("project.invite", err, actor, project=project_id,
                             role=role)
        self._emit("project.invite", "allow", actor, project=project_id,
                   role=role, email=invitation.email)
        return invitation

    def _notify(self, invitation: Invitation) -> None:
        if self.outbox_path is None:
            return
        record = {
            "to": invitation.email,
            "project_id": invitation.project_id,
            "role": invitation.role,
            "token": invitation.token,
            "expires_at": invitation.expires_at,
            "sent_at": self.clock.now(),
        }
        self.outbox_path.parent.mkdir(parents=True, exist_ok=True)
        with self.outbox_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def peek_invitation(self, token: str) -> Invitation:
        with self._lock:
            invitation = self._invitations.get(token)
        if invitation is None:
            raise UnknownToken(token)
        return invitation

    @decision_op("project.accept")
    def accept_invitation(self, token: str, persistent_id: str) -> RoleBinding:
        try:
            binding = self._consume_locked(token, persistent_id, expected_email=None)
        except Exception as err:
            raise self._deny("project.accept", err, persistent_id)
        self._emit("project.accept", "allow", persistent_id,
                   project=binding.project_id or "", role=binding.role)
        return binding

    def consume_invitation(
        self, token: str, persistent_id: str, expected_email: Optional[str]
    ) -> RoleBinding:
        """Registration-path consumption: email must match the invitation.

        Raises NoMatchingAuthorization rather than UnknownToken so a missing
        or mismatched invitation reads as an authorization failure.
        """
        try:
            return self._consume_locked(token, persistent_id, expected_email)
        except (UnknownToken, Forbidden, AlreadyConsumed):
            raise NoMatchingAuthorization("no invitation authorizes this identity")

    def _consume_locked(
        self, token: str, persistent_id: str, expected_email: Optional[str]
    ) -> RoleBinding:
        with self._lock:
            invitation = self._invitations.get(token)
            if invitation is None:
                raise UnknownToken(token)
            if expected_email is not None and (
                invitation.email != expected_email.strip().casefold()
            ):
                raise Forbidden("invitation issued to a different email")
            now = self.clock.now()
            if invitation.state == "consumed":
                raise AlreadyConsumed(token)
            if invitation.state in ("expired", "cancelled") or now >= invitation.expires_at:
                invitation.state = "expired"
                raise InvitationExpired(token)
            try:
                self._active_project(invitation.project_id, now)
            except ProjectInactive:
                # The project died under the invitation; it is no longer honorable.
                invitation.state = "expired"
                raise InvitationExpired(token)
            invitation.state = "consumed"
            binding = RoleBinding(
                persistent_id=persistent_id,
                role=invitation.role,
                project_id=invitation.project_id,
                granted_at=now,
            )
            self._add_binding(binding)
            return binding

    # --- revocation ---

    @decision_op("project.revoke")
    def revoke(
        self,
        actor_session,
        target: str,
        project_id: Optional[str] = None,
        whole_project: bool = False,
    ) -> int:
        """Remove bindings and flag the target's credentials downstream.

        PIs may remove researchers from their own project; allocators may
        remove anyone from a project or retire the whole project; admins may
        remove global (allocator/admin) roles when someone leaves the team.
        """
        actor = actor_session.persistent_id
        try:
            removed = 0
            with self._lock:
                if whole_project:
                    if project_id is None:
                        raise NothingToRevoke("no project scope")
                    if not self.has_role(actor, "allocator"):
                        raise Forbidden("allocator role required")
                    project = self.get_project(project_id)
                    members = [
                        b for b in self._bindings if b.project_id == project_id
                    ]
                    for binding in members:
                        self._remove_binding(binding)
                        self._notify_revoked(binding.persistent_id, project_id)
                    project.state = "revoked"
                    removed = len(members)
                elif project_id is not None:
                    matches = [
                        b for b in self._by_pid.get(target, [])
                        if b.project_id == project_id
                    ]
                    if self.has_role(actor, "allocator"):
                        pass
                    elif self.has_role(actor, "pi", project_id):
                        if any(b.role != "researcher" for b in matches):
                            raise Forbidden("PIs may only revoke researchers")
                    else:
                        raise Forbidden("allocator or project PI required")
                    if not matches:
                        raise NothingToRevoke(f"{target} on {project_id}")
                    for binding in matches:
                        self._remove_binding(binding)
                    self._notify_revoked(target, project_id)
                    removed = len(matches)
                else:
                    if not self.has_role(actor, "admin"):
                        raise Forbidden("admin role required for global roles")
                    matches = [
                        b for b in self._by_pid.get(target, [])
                        if b.project_id is None
                    ]
                    if not matches:
                        raise NothingToRevoke(target)
                    for binding in matches:
                        self._remove_binding(binding)
                    self._notify_revoked(target, None)
                    removed = len(matches)
        except Exception as err:
            raise self._deny("project.revoke", err, actor, target=target,
                             project=project_id or "")
        self._emit("project.revoke", "allow", actor, target=target,
                   project=project_id or "", removed=str(removed))
        return removed

    def _notify_revoked(self, persistent_id: str, project_id: Optional[str]) -> None:
        for listener in self.revocation_listeners:
            listener(persistent_id, project_id)

    # --- expiry sweep ---

    def sweep_expiry(self) -> int:
        """Mark overdue projects expired and drop their bindings."""
        with self._lock:
            return self._sweep_locked(self.clock.now())

    def _sweep_locked(self, now: float) -> int:
        flipped = 0
        for project in self._projects.values():
            if project.state == "active" and now >= project.expires_at:
                project.state = "expired"
                flipped += 1
                members = [
                    b for b in self._bindings if b.project_id == project.project_id
                ]
                for binding in members:
                    self._remove_binding(binding)
                    self._notify_revoked(binding.persistent_id, project.project_id)
        return flipped

    # --- linux accounts ---

    @decision_op("account.provision")
    def provision_linux_account(
        self, persistent_id: str, project_id: str
    ) -> LinuxAccount:
        """Idempotent per (user, project); username is code + 4-digit counter."""
        try:
            now = self.clock.now()
            with self._lock:
                self._sweep_locked(now)
                project = self._active_project(project_id, now)
                bound = any(
                    b.project_id == project_id and b.role in PROJECT_ROLES
                    for b in self._by_pid.get(persistent_id, [])
                )
                if not bound:
                    raise NotAuthorized(
                        f"{persistent_id} has no binding on {project_id}"
                    )
                existing = self._accounts.get((persistent_id, project_id))
                if existing is not None:
                    account = existing
                else:
                    seq = self._account_seq.get(project_id, 0) + 1
                    self._account_seq[project_id] = seq
                    username = f"{project.code}-{seq:04d}"
                    if username in self._usernames or len(username) > 31:
                        raise RuntimeError(f"username invariant broken: {username}")
                    account = LinuxAccount(
                        username=username,
                        persistent_id=persistent_id,
                        project_id=project_id,
                        created_at=now,
                    )
                    self._accounts[(persistent_id, project_id)] = account
                    self._usernames.add(username)
        except Exception as err:
            raise self._deny("account.provision", err, persistent_id,
                             project=project_id)
        self._emit("account.provision", "allow", persistent_id,
                   project=project_id, username=account.username)
        return account

    def project_members(
        self, actor_session, project_id: str
    ) -> tuple[Project, list[RoleBinding]]:
        """Membership listing for the dashboard: any member may read it."""
        actor = actor_session.persistent_id
        with self._lock:
            self._sweep_locked(self.clock.now())
            visible = (
                self.has_role(actor, "allocator")
                or self.has_role(actor, "admin")
                or any(
                    b.project_id == project_id
                    for b in self._by_pid.get(actor, [])
                )
            )
            if not visible:
                raise Forbidden("no visibility into this project")
            project = self.get_project(project_id)
            members = [
                b for b in self._bindings if b.project_id == project_id
            ]
        return project, members

    # --- authorization view ---

    def authorizations_for(self, persistent_id: str) -> dict[str, Any]:
        """Active-state-only view: expired or revoked scope leaves no trace."""
        now = self.clock.now()
        with self._lock:
            self._sweep_locked(now)
            bindings = [
                b for b in self._by_pid.get(persistent_id, [])
                if b.expires_at is None or now < b.expires_at
            ]
            active_projects = []
            accounts = []
            for binding in bindings:
                if binding.project_id is None:
                    continue
                project = self._projects.get(binding.project_id)
                if project is None or project.state != "active":
                    continue
                active_projects.append(project)
                account = self._accounts.get((persistent_id, binding.project_id))
                if account is not None:
                    accounts.append(account)
            seen: set[str] = set()
            active_projects = [
                p for p in active_projects
                if not (p.project_id in seen or seen.add(p.project_id))
            ]
        return {
            "bindings": bindings,
            "linux_accounts": sorted(accounts, key=lambda a: a.username),
            "active_projects": sorted(active_projects, key=lambda p: p.code),
        }

    # --- token issuance policy ---

    def authorize_token(
        self,
        persistent_id: str,
        audience: str,
        project_scope: Optional[str],
    ) -> tuple[str, Optional[str]]:
        """Decide (role, project_scope) for a token request, or refuse.

        Per-service RBAC: management audiences need the admin role, tunnel
        and ssh-ca audiences need a live project membership. Service-plane
        audiences are never user-issuable.
        """
        auth = self.authorizations_for(persistent_id)
        bindings = auth["bindings"]
        if audience.startswith("mgmt:"):
            if not any(b.role == "admin" for b in bindings):
                raise NotAuthorized("admin role required")
            return "admin", None
        if audience in ("tunnel-admin", "siem:ingest"):
            raise NotAuthorized(f"{audience} is a service-plane audience")
        project_bindings = [b for b in bindings if b.role in PROJECT_ROLES]
        active_ids = {p.project_id for p in auth["active_projects"]}
        project_bindings = [
            b for b in project_bindings if b.project_id in active_ids
        ]
        if audience == "ssh-ca" or audience.startswith("tunnel:"):
            if not project_bindings:
                raise NotAuthorized("no active project membership")
            if project_scope is not None:
                scoped = [
                    b for b in project_bindings if b.project_id == project_scope
                ]
                if not scoped:
                    raise NotAuthorized(f"no membership on {project_scope}")
                project_bindings = scoped
            elif audience.startswith("tunnel:"):
                earliest = min(project_bindings, key=lambda b: b.granted_at)
                project_scope = earliest.project_id
                project_bindings = [
                    b for b in project_bindings
                    if b.project_id == project_scope
                ]
            role = (
                "pi" if any(b.role == "pi" for b in project_bindings)
                else "researcher"
            )
            return role, project_scope
        raise NotAuthorized(f"unknown audience {audience!r}")
