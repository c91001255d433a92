"""Error hierarchy shared by all services.

Each error carries a stable machine-readable `code` used by the HTTP layer,
the CLI exit-code mapping, and audit event attributes. Policy denials and
validation failures are ordinary control flow here, so these are cheap,
data-bearing exceptions.
"""

from __future__ import annotations


class GatekeepError(Exception):
    code = "error"
    http_status = 400

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.code)
        self.detail = detail or self.code


# --- identity broker ---

class UnknownIdP(GatekeepError):
    code = "unknown_idp"
    http_status = 404


class MfaRequired(GatekeepError):
    code = "mfa_required"
    http_status = 401


class UnregisteredIdentity(GatekeepError):
    code = "unregistered_identity"
    http_status = 403


class IdentitySuspended(GatekeepError):
    code = "identity_suspended"
    http_status = 403


class AssertionInvalid(GatekeepError):
    code = "assertion_invalid"
    http_status = 401


class NoMatchingAuthorization(GatekeepError):
    code = "no_matching_authorization"
    http_status = 403


class AlreadyRegistered(GatekeepError):
    code = "already_registered"
    http_status = 409


class PairAlreadyLinkedElsewhere(GatekeepError):
    code = "pair_already_linked_elsewhere"
    http_status = 409


class SessionExpired(GatekeepError):
    code = "session_expired"
    http_status = 401


class NotFound(GatekeepError):
    code = "not_found"
    http_status = 404


# --- project registry ---

class Forbidden(GatekeepError):
    code = "forbidden"
    http_status = 403


class DuplicateCode(GatekeepError):
    code = "duplicate_code"
    http_status = 409


class InvalidWindow(GatekeepError):
    code = "invalid_window"


class InvalidCode(GatekeepError):
    code = "invalid_code"


class RoleNotInvitable(GatekeepError):
    code = "role_not_invitable"


class ProjectInactive(GatekeepError):
    code = "project_inactive"
    http_status = 409


class InvitationExpired(GatekeepError):
    code = "invitation_expired"
    http_status = 410


class AlreadyConsumed(GatekeepError):
    code = "already_consumed"
    http_status = 409


class UnknownToken(GatekeepError):
    code = "unknown_token"
    http_status = 404


class NothingToRevoke(GatekeepError):
    code = "nothing_to_revoke"
    http_status = 404


class NotAuthorized(GatekeepError):
    code = "not_authorized"
    http_status = 403


# --- token service ---

class AdminIdPRequired(GatekeepError):
    code = "admin_idp_required"
    http_status = 403


class BadSignature(GatekeepError):
    code = "bad_signature"
    http_status = 401


class Expired(GatekeepError):
    code = "expired"
    http_status = 401


class NotYetValid(GatekeepError):
    code = "not_yet_valid"
    http_status = 401


class AudienceMismatch(GatekeepError):
    code = "audience_mismatch"
    http_status = 401


class Revoked(GatekeepError):
    code = "revoked"
    http_status = 401


class KillSwitched(GatekeepError):
    code = "kill_switched"
    http_status = 403


class UnknownTarget(GatekeepError):
    code = "unknown_target"
    http_status = 404


# --- ssh ca ---

class TokenInvalid(GatekeepError):
    code = "token_invalid"
    http_status = 401


class NoActiveProjects(GatekeepError):
    code = "no_active_projects"
    http_status = 409


class MalformedKey(GatekeepError):
    code = "malformed_key"


class NoProjects(GatekeepError):
    code = "no_projects"


class CertificateRejected(GatekeepError):
    code = "certificate_rejected"
    http_status = 401

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(detail or reason)
        self.reason = reason


# --- access gateway ---

class PathTaken(GatekeepError):
    code = "path_taken"
    http_status = 409


class Unauthenticated(GatekeepError):
    code = "unauthenticated"
    http_status = 401


class EndpointDown(GatekeepError):
    code = "endpoint_down"
    http_status = 503


class UnknownScope(GatekeepError):
    code = "unknown_scope"


class RateLimited(GatekeepError):
    code = "rate_limited"
    http_status = 429


# --- audit / siem ---

class MalformedAdvisory(GatekeepError):
    code = "malformed_advisory"


class UnknownHost(GatekeepError):
    code = "unknown_host"
    http_status = 404


# --- harness / cli ---

class ScenarioFailed(GatekeepError):
    code = "scenario_failed"

    def __init__(self, step_index: int, expected: str, actual: str):
        super().__init__(
            f"step {step_index}: expected {expected!r}, got {actual!r}"
        )
        self.step_index = step_index
        self.expected = expected
        self.actual = actual


class LoginTimeout(GatekeepError):
    code = "login_timeout"


class BrokerUnreachable(GatekeepError):
    code = "broker_unreachable"
