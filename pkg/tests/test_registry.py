"""Project registry: roles, invitations, revocation, accounts, expiry."""

from __future__ import annotations

import json
import random
import threading

import pytest

from gatekeep import errors

DAY = 86400.0


def _project(stack, session, code="camels", days=30.0):
    now = stack.clock.now()
    return stack.registry.create_project(
        session, code, f"Project {code}",
        {"gpu_hours": 5000, "storage_gb": 2048},
        starts_at=now, expires_at=now + days * DAY,
    )


# --- create_project ---


def test_allocator_creates_project(stack):
    session = stack.login(stack.users["alice"])
    project = _project(stack, session)
    assert project.state == "active"
    assert project.code == "camels"


def test_researcher_cannot_create_project(world):
    session = world.stack.login(world.rae)
    with pytest.raises(errors.Forbidden):
        _project(world.stack, session, code="sneaky")


def test_zero_length_window_rejected(stack):
    session = stack.login(stack.users["alice"])
    now = stack.clock.now()
    with pytest.raises(errors.InvalidWindow):
        stack.registry.create_project(
            session, "flat", "Flat window", {}, starts_at=now, expires_at=now
        )


def test_duplicate_code_rejected(stack):
    session = stack.login(stack.users["alice"])
    _project(stack, session)
    with pytest.raises(errors.DuplicateCode):
        _project(stack, session)


def test_project_code_must_be_posix_safe(stack):
    session = stack.login(stack.users["alice"])
    for bad in ("Camels", "1camels", "camels!", "a" * 17, ""):
        with pytest.raises(errors.InvalidCode):
            _project(stack, session, code=bad)


# --- invite ---


def test_pi_invites_researcher(world):
    session = world.stack.login(world.pat)
    invitation = world.stack.registry.invite(
        session, "new@example.org", world.project.project_id, "researcher"
    )
    assert invitation.state == "pending"
    assert invitation.role == "researcher"


def test_researcher_invite_always_forbidden(world):
    session = world.stack.login(world.rae)
    with pytest.raises(errors.Forbidden):
        world.stack.registry.invite(
            session, "friend@example.org", world.project.project_id, "researcher"
        )


def test_pi_cannot_invite_pi(world):
    session = world.stack.login(world.pat)
    with pytest.raises(errors.RoleNotInvitable):
        world.stack.registry.invite(
            session, "other@example.org", world.project.project_id, "pi"
        )


def test_allocator_cannot_invite_researcher(world):
    session = world.stack.login(world.alice)
    with pytest.raises(errors.RoleNotInvitable):
        world.stack.registry.invite(
            session, "r@example.org", world.project.project_id, "researcher"
        )


def test_invite_on_expired_project(world):
    stack = world.stack
    session = stack.login(world.pat)
    stack.clock.advance(31 * DAY)
    with pytest.raises(errors.ProjectInactive):
        stack.registry.invite(
            session, "late@example.org", world.project.project_id, "researcher"
        )


def test_invitation_outbox_records_email(world):
    stack = world.stack
    session = stack.login(world.pat)
    invitation = stack.registry.invite(
        session, "mail@example.org", world.project.project_id, "researcher"
    )
    lines = [
        json.loads(line)
        for line in stack.registry.outbox_path.read_text().splitlines()
    ]
    assert any(entry["token"] == invitation.token for entry in lines)
    assert any(entry["to"] == "mail@example.org" for entry in lines)


# --- accept_invitation ---


def test_accept_pending_invitation(world):
    stack = world.stack
    session = stack.login(world.pat)
    invitation = stack.registry.invite(
        session, "joiner@example.org", world.project.project_id, "researcher"
    )
    joiner = stack.new_user("joiner")
    identity = stack.identity.admit_identity(
        joiner.idp_id, joiner.subject, "joiner@example.org"
    )
    binding = stack.registry.accept_invitation(
        invitation.token, identity.persistent_id
    )
    assert binding.role == "researcher"
    assert binding.project_id == world.project.project_id


def test_accept_twice_single_use(world):
    stack = world.stack
    session = stack.login(world.pat)
    invitation = stack.registry.invite(
        session, "once@example.org", world.project.project_id, "researcher"
    )
    identity = stack.identity.admit_identity("myaccess", "once", "once@example.org")
    stack.registry.accept_invitation(invitation.token, identity.persistent_id)
    with pytest.raises(errors.AlreadyConsumed):
        stack.registry.accept_invitation(invitation.token, identity.persistent_id)


def test_accept_expired_invitation(world):
    stack = world.stack
    session = stack.login(world.pat)
    invitation = stack.registry.invite(
        session, "slow@example.org", world.project.project_id, "researcher"
    )
    stack.clock.advance(stack.registry.invitation_ttl + 1)
    with pytest.raises(errors.InvitationExpired):
        stack.registry.accept_invitation(invitation.token, "whoever")


def test_accept_unknown_token(stack):
    with pytest.raises(errors.UnknownToken):
        stack.registry.accept_invitation("missing", "whoever")


def test_concurrent_acceptance_exactly_one_success(world):
    stack = world.stack
    session = stack.login(world.pat)
    invitation = stack.registry.invite(
        session, "raced@example.org", world.project.project_id, "researcher"
    )
    identity = stack.identity.admit_identity("myaccess", "raced", "raced@example.org")
    outcomes: list[str] = []
    lock = threading.Lock()
    barrier = threading.Barrier(8)

    def attempt():
        barrier.wait()
        try:
            stack.registry.accept_invitation(
                invitation.token, identity.persistent_id
            )
            result = "ok"
        except errors.AlreadyConsumed:
            result = "consumed"
        with lock:
            outcomes.append(result)

    threads = [threading.Thread(target=attempt) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert outcomes.count("ok") == 1
    assert outcomes.count("consumed") == 7


# --- revoke ---


def test_pi_revokes_researcher_tokens_die(world):
    stack = world.stack
    rae_session = stack.login(world.rae)
    token = stack.tokens.issue_token(rae_session, "tunnel:jupyter")
    stack.tokens.validate_token(token, "tunnel:jupyter")
    pat_session = stack.login(world.pat)
    removed = stack.registry.revoke(
        pat_session, world.rae.persistent_id, project_id=world.project.project_id
    )
    assert removed == 1
    with pytest.raises(errors.Revoked):
        stack.tokens.validate_token(token, "tunnel:jupyter")


def test_researcher_cannot_revoke_pi(world):
    stack = world.stack
    rae_session = stack.login(world.rae)
    with pytest.raises(errors.Forbidden):
        stack.registry.revoke(
            rae_session, world.pat.persistent_id,
            project_id=world.project.project_id,
        )


def test_revoke_nothing(world):
    stack = world.stack
    session = stack.login(world.alice)
    with pytest.raises(errors.NothingToRevoke):
        stack.registry.revoke(
            session, "stranger", project_id=world.project.project_id
        )


def test_allocator_revokes_whole_project(world):
    stack = world.stack
    session = stack.login(world.alice)
    removed = stack.registry.revoke(
        session, "", project_id=world.project.project_id, whole_project=True
    )
    assert removed == 2        # pat + rae
    assert stack.registry.get_project(world.project.project_id).state == "revoked"
    for user in (world.pat, world.rae):
        auth = stack.registry.authorizations_for(user.persistent_id)
        assert auth["bindings"] == []
        assert auth["active_projects"] == []


def test_no_trace_after_revoke_for_all_users(world):
    """Exhaustive check over fixture users after each mutation."""
    stack = world.stack
    pat_session = stack.login(world.pat)
    stack.registry.revoke(
        pat_session, world.rae.persistent_id, project_id=world.project.project_id
    )
    everyone = [world.alice, world.oscar, world.pat, world.rae]
    for user in everyone:
        auth = stack.registry.authorizations_for(user.persistent_id)
        if user is world.rae:
            assert auth["bindings"] == []
            assert auth["linux_accounts"] == []
            assert auth["active_projects"] == []
        else:
            for binding in auth["bindings"]:
                assert binding.persistent_id == user.persistent_id


# --- provisioning ---


def test_first_provision_gets_sequence_0001(world):
    account = world.stack.registry.provision_linux_account(
        world.rae.persistent_id, world.project.project_id
    )
    assert account.username == "camels-0001"


def test_provision_idempotent(world):
    first = world.stack.registry.provision_linux_account(
        world.rae.persistent_id, world.project.project_id
    )
    second = world.stack.registry.provision_linux_account(
        world.rae.persistent_id, world.project.project_id
    )
    assert first == second


def test_two_projects_two_usernames(world):
    stack = world.stack
    alice_session = stack.login(world.alice)
    other = _project(stack, alice_session, code="llamas")
    pat_session = stack.login(world.pat)
    # rae joins the second project as well
    invitation = stack.registry.invite(
        stack.login(world.alice), "pat2@example.org", other.project_id, "pi"
    )
    pat2 = stack.new_user("pat2")
    pat2.email = "pat2@example.org"
    identity2 = stack.identity.register_identity(
        stack.assertion_for(pat2), invitation.token
    )
    inv2 = stack.registry.invite(
        stack.login(pat2), world.rae.email, other.project_id, "researcher"
    )
    stack.registry.accept_invitation(inv2.token, world.rae.persistent_id)

    a1 = stack.registry.provision_linux_account(
        world.rae.persistent_id, world.project.project_id
    )
    a2 = stack.registry.provision_linux_account(
        world.rae.persistent_id, other.project_id
    )
    assert a1.username != a2.username
    assert a1.username.startswith("camels-")
    assert a2.username.startswith("llamas-")


def test_provision_requires_binding(world):
    with pytest.raises(errors.NotAuthorized):
        world.stack.registry.provision_linux_account(
            world.oscar.persistent_id, world.project.project_id
        )


def test_provision_on_expired_project(world):
    world.stack.clock.advance(31 * DAY)
    with pytest.raises((errors.ProjectInactive, errors.NotAuthorized)):
        world.stack.registry.provision_linux_account(
            world.rae.persistent_id, world.project.project_id
        )


def test_username_uniqueness_under_mass_provisioning(stack):
    """10^4 provisions across 50 projects: zero collisions."""
    alice_session = stack.login(stack.users["alice"])
    rng = random.Random(7)
    projects = []
    for p in range(50):
        projects.append(_project(stack, alice_session, code=f"proj{p:02d}"))
    pids = [f"user-{i:05d}" for i in range(10_000)]
    for pid in pids:
        project = rng.choice(projects)
        stack.registry.grant_role(pid, "researcher", project.project_id)
    usernames = []
    for pid in pids:
        binding = stack.registry.roles_of(pid)[0]
        account = stack.registry.provision_linux_account(pid, binding.project_id)
        usernames.append(account.username)
        again = stack.registry.provision_linux_account(pid, binding.project_id)
        assert again.username == account.username
    assert len(set(usernames)) == len(usernames) == 10_000


# --- authorization views ---


def test_expired_project_leaves_authorizations(world):
    stack = world.stack
    stack.registry.provision_linux_account(
        world.rae.persistent_id, world.project.project_id
    )
    auth = stack.registry.authorizations_for(world.rae.persistent_id)
    assert len(auth["active_projects"]) == 1
    stack.clock.advance(31 * DAY)
    auth = stack.registry.authorizations_for(world.rae.persistent_id)
    assert auth["active_projects"] == []
    assert auth["linux_accounts"] == []
    assert auth["bindings"] == []


def test_active_and_expired_projects_only_active_listed(world):
    stack = world.stack
    alice_session = stack.login(world.alice)
    shortlived = _project(stack, alice_session, code="shortly", days=1.0)
    invitation = stack.registry.invite(
        alice_session, "dual@example.org", shortlived.project_id, "pi"
    )
    stack.registry.accept_invitation(invitation.token, world.rae.persistent_id)
    stack.registry.provision_linux_account(
        world.rae.persistent_id, shortlived.project_id
    )
    stack.registry.provision_linux_account(
        world.rae.persistent_id, world.project.project_id
    )
    stack.clock.advance(2 * DAY)        # shortlived expires, camels lives on
    auth = stack.registry.authorizations_for(world.rae.persistent_id)
    assert [p.code for p in auth["active_projects"]] == ["camels"]
    assert [a.username for a in auth["linux_accounts"]] == ["camels-0001"]


def test_unknown_pid_empty_result(stack):
    auth = stack.registry.authorizations_for("nobody")
    assert auth == {"bindings": [], "linux_accounts": [], "active_projects": []}


def test_admin_has_binding_but_no_accounts(stack):
    auth = stack.registry.authorizations_for(
        stack.users["oscar"].persistent_id
    )
    assert [b.role for b in auth["bindings"]] == ["admin"]
    assert auth["linux_accounts"] == []
    assert auth["active_projects"] == []


def test_admin_headcount_soft_warning(stack, caplog):
    import logging

    with caplog.at_level(logging.WARNING, logger="gatekeep.registry"):
        for i in range(21):
            stack.registry.grant_role(f"admin-{i}", "admin")
    assert any("admin headcount" in r.message for r in caplog.records)


# --- role lattice oracle ---


def test_observed_permissions_equal_static_matrix(world):
    """Brute-force every (actor role, action) pair against the live services
    and compare with the declared permission matrix."""
    from gatekeep.registry import PERMISSION_MATRIX

    stack = world.stack
    actors = {
        "allocator": world.alice,
        "pi": world.pat,
        "researcher": world.rae,
        "admin": world.oscar,
    }
    actions = sorted({a for acts in PERMISSION_MATRIX.values() for a in acts})

    def attempt(role: str, action: str) -> bool:
        user = actors[role]
        session = stack.login(user, mfa=True if role == "admin" else None)
        try:
            if action == "project.create":
                _project(stack, session, code=f"probe-{role}"[:16])
            elif action == "project.invite_pi":
                stack.registry.invite(
                    session, f"probe-pi-{role}@example.org",
                    world.project.project_id, "pi",
                )
            elif action == "project.invite_researcher":
                stack.registry.invite(
                    session, f"probe-r-{role}@example.org",
                    world.project.project_id, "researcher",
                )
            elif action == "project.revoke_member":
                # Victim is a PI: revoking a non-researcher member separates
                # allocator power from PI power.
                target = stack.identity.admit_identity(
                    "myaccess", f"victim-pi-{role}", "v@example.org"
                )
                stack.registry.grant_role(
                    target.persistent_id, "pi", world.project.project_id
                )
                stack.registry.revoke(
                    session, target.persistent_id,
                    project_id=world.project.project_id,
                )
            elif action == "project.revoke_researcher":
                target = stack.identity.admit_identity(
                    "myaccess", f"victim-r-{role}", "v@example.org"
                )
                stack.registry.grant_role(
                    target.persistent_id, "researcher", world.project.project_id
                )
                stack.registry.revoke(
                    session, target.persistent_id,
                    project_id=world.project.project_id,
                )
            elif action == "account.provision":
                stack.registry.provision_linux_account(
                    session.persistent_id, world.project.project_id
                )
            elif action == "killswitch.set":
                token = stack.tokens.issue_token(session, "mgmt:killswitch")
                stack.gateway.set_kill_switch(
                    token, f"user:probe-{role}", True
                )
            elif action == "token.rotate":
                stack.tokens.rotate_signing_key(session)
            elif action == "session.revoke_any":
                bystander = world.pat if role != "pi" else world.alice
                other = stack.login(bystander)
                stack.tokens.revoke_session(session, other.session_id)
            else:
                raise AssertionError(f"unmapped action {action}")
            return True
        except errors.GatekeepError:
            return False

    for role in actors:
        for action in actions:
            expected = action in PERMISSION_MATRIX[role]
            observed = attempt(role, action)
            assert observed == expected, (
                f"{role} x {action}: observed={observed} expected={expected}"
            )
