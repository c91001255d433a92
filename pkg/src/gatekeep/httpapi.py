"""HTTP/JSON surface over one service stack.

Every response carries an X-Request-Id header that is echoed into the
audit events emitted while handling it. Mutating requests that repeat a
request id replay the original response, which is what makes CLI retries
after transient network failures safe.
"""

from __future__ import annotations

import threading
import uuid
from typing import Any, Optional

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from .audit import current_request_id
from .errors import GatekeepError, SessionExpired
from .identity import IdPAssertion
from .registry import PERMISSION_MATRIX
from .stack import ServiceStack

REQUEST_ID_HEADER = "X-Request-Id"


class AssertionBody(BaseModel):
    idp_id: str
    subject: str
    email: str
    mfa_satisfied: bool = False
    issued_at: float
    signature: str = ""


class RegisterBody(BaseModel):
    assertion: AssertionBody
    invitation_token: str


class ProjectBody(BaseModel):
    code: str
    title: str
    allocation: dict[str, int] = Field(default_factory=dict)
    starts_at: Optional[float] = None
    expires_at: Optional[float] = None


class InviteBody(BaseModel):
    email: str
    role: str


class TokenBody(BaseModel):
    audience: str
    project_scope: Optional[str] = None
    ttl: Optional[float] = None


class IntrospectBody(BaseModel):
    token: str
    audience: str


class RevokeBody(BaseModel):
    target: str


class SignBody(BaseModel):
    token: str
    public_key: str


class TunnelBody(BaseModel):
    token: str
    path: str
    client_id: str


class KillSwitchBody(BaseModel):
    token: str
    scope: str
    engage: bool


class DeviceApproveBody(BaseModel):
    user_code: str


class DevicePollBody(BaseModel):
    device_code: str


class IngestBody(BaseModel):
    events: list[dict[str, Any]]


class InventoryBody(BaseModel):
    host_id: str
    packages: dict[str, str]
    config: Optional[dict[str, Any]] = None


class AssessBody(BaseModel):
    hosts: list[str]
    ruleset: list[dict[str, Any]]


def _session_payload(session) -> dict[str, Any]:
    return {
        "session_id": session.session_id,
        "persistent_id": session.persistent_id,
        "idp_id": session.idp_id,
        "authenticated_at": session.authenticated_at,
        "expires_at": session.expires_at,
        "mfa_satisfied": session.mfa_satisfied,
    }


def _project_payload(project) -> dict[str, Any]:
    return {
        "project_id": project.project_id,
        "code": project.code,
        "title": project.title,
        "allocation": project.allocation,
        "starts_at": project.starts_at,
        "expires_at": project.expires_at,
        "state": project.state,
    }


def _binding_payload(binding) -> dict[str, Any]:
    return {
        "persistent_id": binding.persistent_id,
        "role": binding.role,
        "project_id": binding.project_id,
        "granted_at": binding.granted_at,
        "expires_at": binding.expires_at,
    }


class EchoBackend:
    """Backend stub attached to tunnels registered over HTTP."""

    def __init__(self, path: str):
        self.path = path
        self.invocations: list[dict[str, Any]] = []

    def handle(self, path: str, headers: dict[str, str], body: Any = None):
        self.invocations.append({"path": path, "headers": dict(headers)})
        return {"status": 200, "body": {"echo": path}}


def create_app(stack: ServiceStack) -> FastAPI:
    app = FastAPI(title="gatekeep", version="0.1.0")
    app.state.stack = stack
    app.state.replay_cache = {}
    app.state.replay_lock = threading.Lock()
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.middleware("http")
    async def request_id_middleware(request: Request, call_next):
        rid = request.headers.get(REQUEST_ID_HEADER) or uuid.uuid4().hex[:12]
        token = current_request_id.set(rid)
        replay_key = None
        if request.method in ("POST", "DELETE") and request.headers.get(
            REQUEST_ID_HEADER
        ):
            replay_key = (request.method, request.url.path, rid)
            with app.state.replay_lock:
                cached = app.state.replay_cache.get(replay_key)
            if cached is not None:
                status, body = cached
                response = Response(
                    content=body, status_code=status,
                    media_type="application/json",
                )
                response.headers[REQUEST_ID_HEADER] = rid
                response.headers["X-Replayed"] = "true"
                current_request_id.reset(token)
                return response
        try:
            response = await call_next(request)
        finally:
            current_request_id.reset(token)
        response.headers[REQUEST_ID_HEADER] = rid
        if replay_key is not None and response.status_code < 500:
            body_chunks = [
                chunk async for chunk in response.body_iterator
            ]
            body = b"".join(body_chunks)
            with app.state.replay_lock:
                if len(app.state.replay_cache) < 4096:
                    app.state.replay_cache[replay_key] = (
                        response.status_code, body,
                    )
            new_response = Response(
                content=body, status_code=response.status_code,
                media_type=response.media_type,
            )
            new_response.headers.update(response.headers)
            return new_response
        return response

    @app.exception_handler(GatekeepError)
    async def gatekeep_error_handler(request: Request, err: GatekeepError):
        return JSONResponse(
            status_code=err.http_status,
            content={"error": err.code, "detail": str(err)},
        )

    def bearer_session(request: Request):
        header = request.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            raise SessionExpired("missing bearer session")
        return stack.identity.require_session(header.removeprefix("Bearer "))

    # --- identity broker ---

    @app.get("/idps")
    def list_idps(kind: Optional[str] = None):
        providers = stack.identity.discover_idps(kind)
        return [
            {
                "idp_id": p.idp_id,
                "kind": p.kind.value,
                "assurance": p.assurance,
                "mfa_required": p.mfa_required,
                "display_name": p.display_name,
            }
            for p in providers
        ]

    @app.post("/authenticate")
    def authenticate(body: AssertionBody):
        assertion = IdPAssertion.from_json(body.model_dump())
        session = stack.identity.authenticate(assertion.idp_id, assertion)
        return _session_payload(session)

    @app.post("/register")
    def register(body: RegisterBody):
        assertion = IdPAssertion.from_json(body.assertion.model_dump())
        identity = stack.identity.register_identity(
            assertion, body.invitation_token
        )
        return {
            "persistent_id": identity.persistent_id,
            "email": identity.email,
            "assurance": identity.assurance,
            "linked": sorted(list(identity.linked)),
        }

    @app.post("/link")
    def link(body: AssertionBody, request: Request):
        session = bearer_session(request)
        assertion = IdPAssertion.from_json(body.model_dump())
        identity = stack.identity.link_identity(session, assertion)
        return {
            "persistent_id": identity.persistent_id,
            "linked": sorted(list(identity.linked)),
            "assurance": identity.assurance,
        }

    @app.get("/resolve")
    def resolve(idp: str, subject: str):
        return {"persistent_id": stack.identity.resolve_persistent_id(idp, subject)}

    # --- device flow ---

    @app.post("/device/start")
    def device_start():
        return stack.identity.device_start(verification_uri="/device")

    @app.post("/device/approve")
    def device_approve(body: DeviceApproveBody, request: Request):
        session = bearer_session(request)
        stack.identity.device_approve(body.user_code, session.session_id)
        return {"approved": True}

    @app.post("/device/poll")
    def device_poll(body: DevicePollBody):
        session = stack.identity.device_poll(body.device_code)
        if session is None:
            return {"pending": True}
        return {"pending": False, "session": _session_payload(session)}

    # --- project registry ---

    @app.post("/projects")
    def create_project(body: ProjectBody, request: Request):
        session = bearer_session(request)
        now = stack.clock.now()
        project = stack.registry.create_project(
            session, body.code, body.title, body.allocation,
            starts_at=body.starts_at if body.starts_at is not None else now,
            expires_at=(
                body.expires_at if body.expires_at is not None
                else now + 30 * 86400.0
            ),
        )
        return _project_payload(project)

    @app.post("/projects/{project_id}/invitations")
    def invite(project_id: str, body: InviteBody, request: Request):
        session = bearer_session(request)
        invitation = stack.registry.invite(
            session, body.email, project_id, body.role
        )
        return {
            "token": invitation.token,
            "email": invitation.email,
            "project_id": invitation.project_id,
            "role": invitation.role,
            "expires_at": invitation.expires_at,
            "state": invitation.state,
        }

    @app.post("/invitations/{token}/accept")
    def accept_invitation(token: str, request: Request):
        session = bearer_session(request)
        binding = stack.registry.accept_invitation(token, session.persistent_id)
        return _binding_payload(binding)

    @app.delete("/projects/{project_id}/members/{pid}")
    def revoke_member(project_id: str, pid: str, request: Request):
        session = bearer_session(request)
        removed = stack.registry.revoke(session, pid, project_id=project_id)
        return {"removed": removed}

    @app.get("/projects/{project_id}/members")
    def project_members(project_id: str, request: Request):
        session = bearer_session(request)
        project, members = stack.registry.project_members(
            session, project_id
        )
        return {
            "project": _project_payload(project),
            "members": [_binding_payload(b) for b in members],
        }

    @app.get("/users/{pid}/authorizations")
    def authorizations(pid: str):
        auth = stack.registry.authorizations_for(pid)
        return {
            "bindings": [_binding_payload(b) for b in auth["bindings"]],
            "linux_accounts": [
                {
                    "username": a.username,
                    "project_id": a.project_id,
                    "created_at": a.created_at,
                }
                for a in auth["linux_accounts"]
            ],
            "active_projects": [
                _project_payload(p) for p in auth["active_projects"]
            ],
        }

    @app.post("/projects/{project_id}/accounts")
    def provision_account(project_id: str, request: Request):
        session = bearer_session(request)
        account = stack.registry.provision_linux_account(
            session.persistent_id, project_id
        )
        return {
            "username": account.username,
            "project_id": account.project_id,
            "created_at": account.created_at,
        }

    @app.post("/admin/sweep-expiry")
    def sweep(request: Request):
        bearer_session(request)
        return {"expired_projects": stack.registry.sweep_expiry()}

    @app.get("/permissions")
    def permissions():
        return PERMISSION_MATRIX

    # --- token service ---

    @app.post("/token")
    def issue_token(body: TokenBody, request: Request):
        session = bearer_session(request)
        token = stack.tokens.issue_token(
            session, body.audience, body.project_scope, ttl=body.ttl
        )
        return {"token": token, "audience": body.audience}

    @app.post("/introspect")
    def introspect(body: IntrospectBody):
        return stack.tokens.introspect(body.token, body.audience)

    @app.post("/revoke")
    def revoke_session(body: RevokeBody, request: Request):
        session = bearer_session(request)
        return stack.tokens.revoke_session(session, body.target)

    @app.post("/rotate")
    def rotate(request: Request):
        session = bearer_session(request)
        return {"key_id": stack.tokens.rotate_signing_key(session)}

    # --- ssh ca ---

    @app.post("/sign")
    def sign(body: SignBody):
        cert = stack.ca.sign_user_key(body.token, body.public_key)
        return cert.to_json()

    @app.get("/ca.pub", response_class=PlainTextResponse)
    def ca_pub():
        return stack.ca.ca_public_key_line() + "\n"

    # --- access gateway ---

    @app.post("/tunnels")
    def register_tunnel(body: TunnelBody):
        backend = EchoBackend(body.path)
        endpoint = stack.gateway.register_tunnel(
            body.token, body.path, body.client_id, backend.handle
        )
        return {
            "path": endpoint.path,
            "service_id": endpoint.service_id,
            "client_id": endpoint.client_id,
            "state": endpoint.state,
        }

    @app.api_route(
        "/t/{path:path}",
        methods=["GET", "POST", "PUT", "DELETE", "PATCH"],
    )
    async def route_tunnel(path: str, request: Request):
        header = request.headers.get("Authorization", "")
        token = header.removeprefix("Bearer ") if header.startswith("Bearer ") else None
        source = request.client.host if request.client else "unknown"
        envelope = stack.gateway.route_web_request(
            "/" + path, token, source=source
        )
        return JSONResponse(
            status_code=envelope.get("status", 200),
            content=envelope.get("body"),
        )

    @app.post("/killswitch")
    def set_killswitch(body: KillSwitchBody):
        switch = stack.gateway.set_kill_switch(body.token, body.scope, body.engage)
        return switch.to_json()

    @app.get("/killswitch")
    def killswitch_state():
        return [s.to_json() for s in stack.gateway.killswitches.snapshot()]

    # --- security centre ---

    @app.post("/ingest")
    def ingest(body: IngestBody):
        return stack.siem.ingest(body.events)

    @app.get("/alerts")
    def alerts(now: Optional[float] = None):
        return [a.to_json() for a in stack.siem.evaluate_alert_rules(now)]

    @app.post("/inventory")
    def inventory(body: InventoryBody):
        records = stack.siem.record_inventory(
            body.host_id, body.packages, body.config
        )
        return {"recorded": len(records)}

    @app.post("/assess")
    def assess(body: AssessBody):
        findings, score = stack.siem.run_config_assessment(body.hosts, body.ruleset)
        return {
            "score": score,
            "findings": [
                {
                    "check_id": f.check_id,
                    "host_id": f.host_id,
                    "status": f.status,
                    "evidence": f.evidence,
                }
                for f in findings
            ],
        }

    @app.get("/export")
    def export():
        return stack.siem.export()

    return app
