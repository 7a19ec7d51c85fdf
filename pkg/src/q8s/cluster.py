"""Kubeconfig loading and a minimal client for the Job/ConfigMap/Pod endpoints."""

from __future__ import annotations

import atexit
import base64
import binascii
import enum
import ipaddress
import os
import re
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from urllib.parse import quote, urlsplit

import requests
import yaml

DEFAULT_NAMESPACE = "default"
CONNECT_TIMEOUT = 10.0
REQUEST_TIMEOUT = 30.0

_DNS_LABEL = re.compile(r"^[a-z0-9]([-a-z0-9]{0,61}[a-z0-9])?$")


class KubeconfigError(Exception):
    pass


class ConfigNotFound(KubeconfigError):
    pass


class ConfigMalformed(KubeconfigError):
    pass


class ApiError(Exception):
    """Error answer from the API server; ``message`` is the server's text."""

    retryable = False

    def __init__(self, status: int | None, message: str, operation: str = ""):
        self.status = status
        self.message = message
        self.operation = operation
        where = f"{operation}: " if operation else ""
        code = f"HTTP {status}: " if status else ""
        super().__init__(f"{where}{code}{message}")


class Unauthorized(ApiError):
    pass


class NotFound(ApiError):
    pass


class Conflict(ApiError):
    pass


class ApiUnavailable(ApiError):
    retryable = True


def is_dns_label(name: str) -> bool:
    return bool(_DNS_LABEL.match(name))


def is_loopback(host: str | None) -> bool:
    if not host:
        return False
    if host == "localhost":
        return True
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


@dataclass(frozen=True)
class ClusterConfig:
    server_url: str
    namespace: str = DEFAULT_NAMESPACE
    context_name: str = ""
    token: str | None = field(default=None, repr=False)
    client_cert: bytes | None = field(default=None, repr=False)
    client_key: bytes | None = field(default=None, repr=False)
    ca_bundle: bytes | None = field(default=None, repr=False)
    insecure: bool = False
    connect_timeout: float = CONNECT_TIMEOUT
    request_timeout: float = REQUEST_TIMEOUT

    def __post_init__(self):
        url = urlsplit(self.server_url)
        if url.scheme not in ("https", "http") or not url.hostname:
            raise ValueError(f"server_url must be an https URL: {self.server_url!r}")
        if url.scheme == "http" and not is_loopback(url.hostname):
            raise ValueError("plain http is only allowed for loopback servers")
        if self.insecure and not is_loopback(url.hostname):
            raise ValueError("TLS verification can only be disabled for loopback servers")
        if not is_dns_label(self.namespace):
            raise ValueError(f"namespace is not a DNS label: {self.namespace!r}")
        has_token = self.token is not None
        has_cert = self.client_cert is not None or self.client_key is not None
        if has_token == has_cert:
            raise ValueError("exactly one of token or client certificate must be set")
        if has_cert and (self.client_cert is None or self.client_key is None):
            raise ValueError("client certificate and key must be given together")

    @property
    def auth_mode(self) -> str:
        return "token" if self.token is not None else "certificate"

    def describe(self) -> dict[str, Any]:
        """Summary safe to print: no credential material."""
        return {
            "context": self.context_name,
            "server": self.server_url,
            "namespace": self.namespace,
            "auth": self.auth_mode,
            "ca_bundle": self.ca_bundle is not None,
        }


def _named(entries: Any, kind: str) -> dict[str, dict]:
    if entries is None:
        return {}
    if not isinstance(entries, list):
        raise ConfigMalformed(f"'{kind}' must be a list")
    out = {}
    for entry in entries:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigMalformed(f"every entry in '{kind}' needs a name")
        out[entry["name"]] = entry.get(kind[:-1]) or {}
    return out


def _b64(value: str, what: str) -> bytes:
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError, TypeError) as exc:
        raise ConfigMalformed(f"{what} is not valid base64") from exc


def _inline_or_file(section: dict, key: str, base_dir: Path) -> bytes | None:
    if section.get(f"{key}-data"):
        return _b64(section[f"{key}-data"], f"{key}-data")
    if section.get(key):
        path = base_dir / os.path.expanduser(section[key])
        try:
            return path.read_bytes()
        except OSError as exc:
            raise ConfigMalformed(f"cannot read {key} file {path}") from exc
    return None


def load_kubeconfig(
    path: str | os.PathLike | None = None,
    *,
    context: str | None = None,
    namespace: str | None = None,
) -> ClusterConfig:
    """Parse a kubeconfig file and resolve its current (or given) context.

    ``path`` defaults to the ``KUBECONFIG`` environment variable. Only bearer
    token and client certificate users are supported.
    """
    if path is None:
        path = os.environ.get("KUBECONFIG")
        if not path:
            raise ConfigNotFound("KUBECONFIG is not set")
        path = path.split(os.pathsep)[0]
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError as exc:
        raise ConfigNotFound(f"kubeconfig not found: {path}") from exc
    except OSError as exc:
        raise ConfigNotFound(f"kubeconfig not readable: {path}: {exc.strerror}") from exc

    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigMalformed(f"{path}: not valid YAML") from exc
    if not isinstance(doc, dict):
        raise ConfigMalformed(f"{path}: expected a mapping at top level")

    clusters = _named(doc.get("clusters"), "clusters")
    users = _named(doc.get("users"), "users")
    contexts = _named(doc.get("contexts"), "contexts")

    ctx_name = context or doc.get("current-context")
    if not ctx_name:
        raise ConfigMalformed(f"{path}: no current-context")
    if ctx_name not in contexts:
        raise ConfigMalformed(f"{path}: context {ctx_name!r} is not defined")
    ctx = contexts[ctx_name]
    cluster_name, user_name = ctx.get("cluster"), ctx.get("user")
    if cluster_name not in clusters:
        raise ConfigMalformed(f"{path}: context {ctx_name!r} refers to unknown cluster {cluster_name!r}")
    if user_name not in users:
        raise ConfigMalformed(f"{path}: context {ctx_name!r} refers to unknown user {user_name!r}")
    cluster, user = clusters[cluster_name], users[user_name]

    base_dir = path.parent
    server = cluster.get("server")
    if not server:
        raise ConfigMalformed(f"{path}: cluster {cluster_name!r} has no server")

    token = user.get("token")
    if token is None and user.get("tokenFile"):
        try:
            token = (base_dir / user["tokenFile"]).read_text().strip()
        except OSError as exc:
            raise ConfigMalformed(f"{path}: cannot read tokenFile") from exc
    cert = _inline_or_file(user, "client-certificate", base_dir)
    key = _inline_or_file(user, "client-key", base_dir)
    if token is None and cert is None and key is None:
        raise ConfigMalformed(
            f"{path}: user {user_name!r} has no supported credential (token or client certificate)"
        )
    if token is not None and (cert is not None or key is not None):
        # Token wins, matching kubectl's preference order.
        cert = key = None

    try:
        return ClusterConfig(
            server_url=server,
            namespace=namespace or ctx.get("namespace") or DEFAULT_NAMESPACE,
            context_name=ctx_name,
            token=token,
            client_cert=cert,
            client_key=key,
            ca_bundle=_inline_or_file(cluster, "certificate-authority", base_dir),
            insecure=bool(cluster.get("insecure-skip-tls-verify", False)),
        )
    except ValueError as exc:
        raise ConfigMalformed(f"{path}: {exc}") from exc


class JobPhase(str, enum.Enum):
    PENDING = "Pending"
    ACTIVE = "Active"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (JobPhase.SUCCEEDED, JobPhase.FAILED)


@dataclass(frozen=True)
class JobStatus:
    phase: JobPhase
    exit_code: int | None = None
    pod_name: str | None = None
    reason: str = ""

    def __post_init__(self):
        if self.phase.terminal != (self.exit_code is not None):
            raise ValueError("exit_code is present exactly for terminal phases")
        if self.phase is JobPhase.SUCCEEDED and self.exit_code != 0:
            raise ValueError("a succeeded job has exit code 0")


def _container_exit_code(pod: dict) -> int | None:
    for cs in pod.get("status", {}).get("containerStatuses") or []:
        terminated = (cs.get("state") or {}).get("terminated")
        if terminated and "exitCode" in terminated:
            return int(terminated["exitCode"])
    return None


class ClusterClient:
    """One method per API interaction, each a single request and response.

    No retries happen here; callers decide what to do with
    :class:`ApiUnavailable`.
    """

    def __init__(self, cfg: ClusterConfig):
        self.cfg = cfg
        self._base = cfg.server_url.rstrip("/")
        self._headers = {"Accept": "application/json"}
        if cfg.token is not None:
            self._headers["Authorization"] = f"Bearer {cfg.token}"
        self._tmpdir = None
        self._cert = None
        self._verify: bool | str = not cfg.insecure
        if cfg.client_cert is not None or (cfg.ca_bundle is not None and not cfg.insecure):
            # requests only accepts certificate material as file paths.
            self._tmpdir = tempfile.mkdtemp(prefix="q8s-tls-")
            atexit.register(shutil.rmtree, self._tmpdir, True)
            if cfg.client_cert is not None:
                self._cert = (self._write("client.crt", cfg.client_cert),
                              self._write("client.key", cfg.client_key))
            if cfg.ca_bundle is not None and not cfg.insecure:
                self._verify = self._write("ca.crt", cfg.ca_bundle)

    def _write(self, name: str, data: bytes) -> str:
        path = os.path.join(self._tmpdir, name)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        return path

    @property
    def namespace(self) -> str:
        return self.cfg.namespace

    def _request(self, operation: str, method: str, path: str, body: dict | None = None):
        try:
            resp = requests.request(
                method,
                self._base + path,
                headers=self._headers,
                json=body,
                cert=self._cert,
                verify=self._verify,
                timeout=(self.cfg.connect_timeout, self.cfg.request_timeout),
                allow_redirects=False,
            )
        except requests.RequestException as exc:
            raise ApiUnavailable(None, type(exc).__name__, operation) from None
        if resp.status_code < 300:
            return resp
        try:
            message = resp.json().get("message", "")
        except ValueError:
            message = resp.text.strip()
        message = message or resp.reason or ""
        status = resp.status_code
        if status in (401, 403):
            raise Unauthorized(status, message, operation)
        if status == 404:
            raise NotFound(status, message, operation)
        if status == 409:
            raise Conflict(status, message, operation)
        if status >= 500 or status == 429:
            raise ApiUnavailable(status, message, operation)
        raise ApiError(status, message, operation)

    def _ns(self, group: str) -> str:
        return f"{group}/namespaces/{quote(self.namespace)}"

    def create_job(self, job: dict) -> str:
        resp = self._request("create_job", "POST", f"{self._ns('/apis/batch/v1')}/jobs", job)
        return resp.json()["metadata"]["name"]

    def create_configmap(self, cm: dict) -> str:
        resp = self._request("create_configmap", "POST", f"{self._ns('/api/v1')}/configmaps", cm)
        return resp.json()["metadata"]["name"]

    def read_job(self, name: str) -> dict:
        return self._request("get_job", "GET", f"{self._ns('/apis/batch/v1')}/jobs/{quote(name)}").json()

    def list_job_pods(self, name: str) -> list[dict]:
        path = f"{self._ns('/api/v1')}/pods?labelSelector=" + quote(f"job-name={name}", safe="")
        return self._request("list_pods", "GET", path).json().get("items") or []

    def get_job_status(self, name: str) -> JobStatus:
        status = self.read_job(name).get("status") or {}
        terminal = None
        reason = ""
        for cond in status.get("conditions") or []:
            if cond.get("status") != "True":
                continue
            if cond.get("type") == "Complete":
                terminal = JobPhase.SUCCEEDED
            elif cond.get("type") == "Failed":
                terminal, reason = JobPhase.FAILED, cond.get("reason", "")
        if terminal is None:
            if "ready" in status:
                running = (status.get("ready") or 0) > 0
            else:
                running = (status.get("active") or 0) > 0
            return JobStatus(JobPhase.ACTIVE if running else JobPhase.PENDING)

        pods = self.list_job_pods(name)
        pod_name, exit_code = None, None
        for pod in pods:
            code = _container_exit_code(pod)
            if code is not None:
                pod_name, exit_code = pod["metadata"]["name"], code
        if pod_name is None and pods:
            pod_name = pods[-1]["metadata"]["name"]
        if terminal is JobPhase.SUCCEEDED:
            exit_code = 0
        elif exit_code is None:
            # Failed without a terminated container (e.g. deadline exceeded).
            exit_code = 1
        return JobStatus(terminal, exit_code, pod_name, reason)

    def get_pod_logs(self, pod: str) -> str:
        resp = self._request("get_log", "GET", f"{self._ns('/api/v1')}/pods/{quote(pod)}/log")
        resp.encoding = "utf-8"
        return resp.text

    def delete_job(self, name: str) -> None:
        path = f"{self._ns('/apis/batch/v1')}/jobs/{quote(name)}?propagationPolicy=Background"
        self._request("delete_job", "DELETE", path)

    def delete_configmap(self, name: str) -> None:
        self._request("delete_configmap", "DELETE", f"{self._ns('/api/v1')}/configmaps/{quote(name)}")
