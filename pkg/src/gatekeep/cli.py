"""User-facing client: login, certificates, project management, kill switches.

Exit codes are fixed for scriptability: 0 ok, 2 timeout, 3 connectivity,
4 authentication (re-login), 5 authorization (refused). The only secret the
client ever stores is the session cache; every privileged call first
obtains a fresh audience-scoped token.
"""

from __future__ import annotations

import json
import os
import stat
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import click
import httpx

from . import sshca, sshwire
from .errors import BrokerUnreachable, LoginTimeout
from .sshca import SshCertificate

EXIT_OK = 0
EXIT_TIMEOUT = 2
EXIT_CONNECTIVITY = 3
EXIT_AUTH = 4
EXIT_FORBIDDEN = 5

DEFAULT_CONFIG_PATH = "~/.config/gatekeep/config"


@dataclass
class ClientConfig:
    broker: str = "http://127.0.0.1:8460"
    cluster_domain: str = "aip1.example"
    bastion: str = "bastion.example"
    token_cache: Path = Path("~/.gatekeep/session.json")
    ssh_config: Path = Path("~/.ssh/config")
    timeout: float = 10.0
    poll_interval: float = 1.0

    def __post_init__(self) -> None:
        self.token_cache = Path(self.token_cache).expanduser()
        self.ssh_config = Path(self.ssh_config).expanduser()
        if "://" not in self.broker:
            raise click.UsageError(f"broker URL must be absolute: {self.broker!r}")


def load_config(path: Optional[str] = None, broker: Optional[str] = None) -> ClientConfig:
    """key=value config file, overridden by GATEKEEP_BROKER and --broker."""
    config_path = Path(
        path or os.environ.get("GATEKEEP_CONFIG", DEFAULT_CONFIG_PATH)
    ).expanduser()
    values: dict[str, str] = {}
    if config_path.exists():
        for line in config_path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    broker_url = (
        broker
        or os.environ.get("GATEKEEP_BROKER")
        or values.get("broker")
        or ClientConfig.broker
    )
    return ClientConfig(
        broker=broker_url,
        cluster_domain=values.get("cluster_domain", ClientConfig.cluster_domain),
        bastion=values.get("bastion", ClientConfig.bastion),
        token_cache=values.get("token_cache", ClientConfig.token_cache),
        ssh_config=values.get("ssh_config", ClientConfig.ssh_config),
        timeout=float(values.get("timeout", ClientConfig.timeout)),
        poll_interval=float(values.get("poll_interval", ClientConfig.poll_interval)),
    )


def build_client(config: ClientConfig) -> httpx.Client:
    """Overridable in tests to route against an in-process app."""
    return httpx.Client(base_url=config.broker, timeout=config.timeout)


class Api:
    """Thin endpoint wrapper translating transport errors and carrying the
    per-command request id that makes re-POSTs after failures safe."""

    def __init__(self, config: ClientConfig, client: Optional[httpx.Client] = None):
        self.config = config
        self.client = client or build_client(config)

    def request(
        self,
        method: str,
        path: str,
        json_body: Any = None,
        session_id: Optional[str] = None,
        request_id: Optional[str] = None,
    ) -> httpx.Response:
        headers = {}
        if session_id:
            headers["Authorization"] = f"Bearer {session_id}"
        if request_id:
            headers["X-Request-Id"] = request_id
        try:
            return self.client.request(
                method, path, json=json_body, headers=headers
            )
        except httpx.TimeoutException as err:
            raise BrokerUnreachable(f"timeout contacting broker: {err}")
        except httpx.TransportError as err:
            raise BrokerUnreachable(f"cannot reach broker: {err}")


def fail_for_status(response: httpx.Response) -> None:
    if response.status_code < 400:
        return
    try:
        payload = response.json()
        message = f"{payload.get('error')}: {payload.get('detail', '')}"
    except Exception:
        message = response.text
    if response.status_code in (401,):
        raise SystemExit(_err(message, EXIT_AUTH))
    if response.status_code in (403,):
        raise SystemExit(_err(message, EXIT_FORBIDDEN))
    raise SystemExit(_err(message, 1))


def _err(message: str, code: int) -> int:
    click.echo(f"error: {message.strip()}", err=True)
    return code


def save_session(config: ClientConfig, payload: dict[str, Any]) -> None:
    config.token_cache.parent.mkdir(parents=True, exist_ok=True)
    config.token_cache.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    config.token_cache.chmod(stat.S_IRUSR | stat.S_IWUSR)


def load_session(config: ClientConfig) -> dict[str, Any]:
    if not config.token_cache.exists():
        raise SystemExit(_err("no cached session; run `gatekeep login`", EXIT_AUTH))
    return json.loads(config.token_cache.read_text(encoding="utf-8"))


@click.group()
@click.option("--broker", default=None, help="Broker base URL.")
@click.option("--config", "config_path", default=None, help="Config file path.")
@click.pass_context
def main(ctx: click.Context, broker: Optional[str], config_path: Optional[str]):
    """Client for the cluster access control plane."""
    config = load_config(config_path, broker)
    ctx.obj = Api(config)


@main.command()
@click.option("--idp", default=None, help="Preferred identity provider id.")
@click.option("--timeout", default=60.0, show_default=True,
              help="Seconds to wait for browser approval.")
@click.pass_obj
def login(api: Api, idp: Optional[str], timeout: float):
    """Start a device-style login and wait for portal approval."""
    try:
        response = api.request("POST", "/device/start")
        fail_for_status(response)
        grant = response.json()
        verification = f"{api.config.broker.rstrip('/')}{grant['verification_uri']}"
        click.echo("To sign in, open the portal and approve this request:")
        click.echo(f"  {verification}?code={grant['user_code']}")
        click.echo(f"  code: {grant['user_code']}")
        if idp:
            click.echo(f"  (choose provider: {idp})")
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            poll = api.request(
                "POST", "/device/poll",
                json_body={"device_code": grant["device_code"]},
            )
            fail_for_status(poll)
            payload = poll.json()
            if not payload.get("pending", True):
                save_session(api.config, payload["session"])
                click.echo(
                    f"logged in as {payload['session']['persistent_id']}"
                )
                return
            time.sleep(min(grant.get("interval", 1), api.config.poll_interval))
        raise LoginTimeout(f"no approval within {timeout:.0f}s")
    except LoginTimeout as err:
        raise SystemExit(_err(str(err), EXIT_TIMEOUT))
    except BrokerUnreachable as err:
        raise SystemExit(_err(str(err), EXIT_CONNECTIVITY))


@main.command()
@click.option("--key", "key_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Path to the SSH public key to sign.")
@click.option("--update-ssh-config", is_flag=True,
              help="Rewrite the managed block in the SSH config.")
@click.option("--ssh-config", "ssh_config_path", default=None,
              help="SSH config path (defaults to the configured one).")
@click.pass_obj
def cert(api: Api, key_path: str, update_ssh_config: bool,
         ssh_config_path: Optional[str]):
    """Obtain a short-lived SSH certificate for the cached session."""
    try:
        session = load_session(api.config)
        token_response = api.request(
            "POST", "/token", json_body={"audience": "ssh-ca"},
            session_id=session["session_id"],
        )
        fail_for_status(token_response)
        access_token = token_response.json()["token"]
        public_key_text = Path(key_path).read_text(encoding="utf-8")
        sign_response = api.request(
            "POST", "/sign",
            json_body={"token": access_token, "public_key": public_key_text},
        )
        fail_for_status(sign_response)
        cert_payload = sign_response.json()
        cert_path = _certificate_path(Path(key_path))
        cert_path.write_text(cert_payload["certificate"], encoding="utf-8")
        click.echo(f"certificate written to {cert_path}")
        click.echo(
            "principals: " + ", ".join(cert_payload["principals"])
        )
        if update_ssh_config:
            _rewrite_ssh_config(
                api, session, cert_payload,
                Path(ssh_config_path).expanduser() if ssh_config_path
                else api.config.ssh_config,
                identity_file=str(Path(key_path)).removesuffix(".pub"),
            )
    except BrokerUnreachable as err:
        raise SystemExit(_err(str(err), EXIT_CONNECTIVITY))


def _certificate_path(key_path: Path) -> Path:
    stem = key_path.name.removesuffix(".pub")
    return key_path.with_name(f"{stem}-cert.pub")


def _rewrite_ssh_config(
    api: Api, session: dict[str, Any], cert_payload: dict[str, Any],
    ssh_config_path: Path, identity_file: str,
) -> None:
    auth_response = api.request(
        "GET", f"/users/{session['persistent_id']}/authorizations"
    )
    fail_for_status(auth_response)
    auth = auth_response.json()
    projects = [SimpleProject(p["code"]) for p in auth["active_projects"]]
    accounts = {}
    by_id = {p["project_id"]: p["code"] for p in auth["active_projects"]}
    for account in auth["linux_accounts"]:
        code = by_id.get(account["project_id"])
        if code:
            accounts[code] = account["username"]
    certificate = _certificate_from_payload(cert_payload)
    block = sshca.render_ssh_config(
        certificate, projects, accounts,
        api.config.bastion, api.config.cluster_domain,
        identity_file=identity_file,
    )
    existing = (
        ssh_config_path.read_text(encoding="utf-8")
        if ssh_config_path.exists() else ""
    )
    ssh_config_path.parent.mkdir(parents=True, exist_ok=True)
    ssh_config_path.write_text(
        sshca.upsert_managed_block(existing, block), encoding="utf-8"
    )
    click.echo(f"ssh config updated: {ssh_config_path}")
    for project in projects:
        click.echo(f"  ssh {project.code}.{api.config.cluster_domain}")


class SimpleProject:
    def __init__(self, code: str):
        self.code = code


def _certificate_from_payload(payload: dict[str, Any]) -> SshCertificate:
    blob = sshwire.parse_certificate_file(payload["certificate"])
    return SshCertificate(
        serial=payload["serial"],
        key_id=payload["key_id"],
        principals=tuple(payload["principals"]),
        valid_after=payload["valid_after"],
        valid_before=payload["valid_before"],
        blob=blob,
        file_text=payload["certificate"],
    )


@main.group()
def project():
    """Project membership commands."""


@project.command("list")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.pass_obj
def project_list(api: Api, as_json: bool):
    """List the caller's active projects and accounts."""
    try:
        session = load_session(api.config)
        response = api.request(
            "GET", f"/users/{session['persistent_id']}/authorizations"
        )
        fail_for_status(response)
        auth = response.json()
        if as_json:
            click.echo(json.dumps(auth, indent=2, sort_keys=True))
            return
        if not auth["active_projects"]:
            click.echo("no active projects")
            return
        accounts = {a["project_id"]: a["username"] for a in auth["linux_accounts"]}
        roles: dict[str, list[str]] = {}
        for binding in auth["bindings"]:
            if binding["project_id"]:
                roles.setdefault(binding["project_id"], []).append(binding["role"])
        header = f"{'CODE':<18}{'ROLE':<14}{'ACCOUNT':<16}{'EXPIRES':<12}TITLE"
        click.echo(header)
        for proj in auth["active_projects"]:
            expires_days = max(
                0, int((proj["expires_at"] - time.time()) / 86400.0)
            )
            click.echo(
                f"{proj['code']:<18}"
                f"{','.join(roles.get(proj['project_id'], [])):<14}"
                f"{accounts.get(proj['project_id'], '-'):<16}"
                f"{f'{expires_days}d':<12}"
                f"{proj['title']}"
            )
    except BrokerUnreachable as err:
        raise SystemExit(_err(str(err), EXIT_CONNECTIVITY))


@project.command("invite")
@click.argument("email")
@click.option("--project", "project_id", required=True, help="Project id.")
@click.option("--role", default="researcher", show_default=True,
              type=click.Choice(["pi", "researcher"]))
@click.option("--json", "as_json", is_flag=True)
@click.pass_obj
def project_invite(api: Api, email: str, project_id: str, role: str, as_json: bool):
    """Invite someone onto a project (role checked server-side)."""
    try:
        session = load_session(api.config)
        response = api.request(
            "POST", f"/projects/{project_id}/invitations",
            json_body={"email": email, "role": role},
            session_id=session["session_id"],
            request_id=os.urandom(8).hex(),
        )
        fail_for_status(response)
        invitation = response.json()
        if as_json:
            click.echo(json.dumps(invitation, indent=2, sort_keys=True))
        else:
            click.echo(f"invitation token: {invitation['token']}")
    except BrokerUnreachable as err:
        raise SystemExit(_err(str(err), EXIT_CONNECTIVITY))


@project.command("revoke")
@click.argument("persistent_id")
@click.option("--project", "project_id", required=True, help="Project id.")
@click.pass_obj
def project_revoke(api: Api, persistent_id: str, project_id: str):
    """Remove a member from a project."""
    try:
        session = load_session(api.config)
        response = api.request(
            "DELETE", f"/projects/{project_id}/members/{persistent_id}",
            session_id=session["session_id"],
            request_id=os.urandom(8).hex(),
        )
        fail_for_status(response)
        click.echo(f"removed {response.json()['removed']} binding(s)")
    except BrokerUnreachable as err:
        raise SystemExit(_err(str(err), EXIT_CONNECTIVITY))


@main.group()
def admin():
    """Privileged operations (admin IdP required)."""


@admin.command("killswitch")
@click.argument("action", type=click.Choice(["engage", "release"]))
@click.option("--scope", required=True,
              help="user:<pid>, service:<id>, or global.")
@click.option("--yes", is_flag=True, help="Skip the global-scope confirmation.")
@click.pass_obj
def admin_killswitch(api: Api, action: str, scope: str, yes: bool):
    """Engage or release a kill switch."""
    try:
        if scope == "global" and action == "engage" and not yes:
            if not click.confirm(
                "Engage the GLOBAL kill switch and block all access?"
            ):
                click.echo("no action taken")
                return
        session = load_session(api.config)
        token_response = api.request(
            "POST", "/token", json_body={"audience": "mgmt:killswitch"},
            session_id=session["session_id"],
        )
        fail_for_status(token_response)
        token = token_response.json()["token"]
        response = api.request(
            "POST", "/killswitch",
            json_body={
                "token": token, "scope": scope, "engage": action == "engage",
            },
            request_id=os.urandom(8).hex(),
        )
        fail_for_status(response)
        switch = response.json()
        click.echo(
            f"{switch['scope']}: {switch['state']} "
            f"(engaged_at={switch['engaged_at']})"
        )
    except BrokerUnreachable as err:
        raise SystemExit(_err(str(err), EXIT_CONNECTIVITY))


@main.command()
@click.option("--port", default=8460, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--state-dir", default=None, help="Where service state lives.")
def serve(port: int, host: str, state_dir: Optional[str]):
    """Run the whole control plane locally (demo and portal development)."""
    import uvicorn

    from .clock import SystemClock
    from .httpapi import create_app
    from .stack import ServiceStack

    stack = ServiceStack(state_dir=state_dir, clock=SystemClock()).bootstrap()
    click.echo(f"state dir: {stack.state_dir}")
    click.echo("demo identities: alice (allocator), oscar (admin)")
    uvicorn.run(create_app(stack), host=host, port=port, log_level="warning")


if __name__ == "__main__":
    sys.exit(main())
