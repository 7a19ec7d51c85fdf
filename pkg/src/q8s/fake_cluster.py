"""In-process stand-in for the cluster API subset the client uses.

Jobs advance one lifecycle step per status read rather than with wall-clock
time, so tests can assert exact poll counts. Faults are injected by
(operation, occurrence) where occurrences are counted server-wide per
operation, starting at 1.

Operations: ``create_job``, ``create_configmap``, ``get_job``, ``list_pods``,
``get_log``, ``delete_job``, ``delete_configmap``. Fault kinds:
``http-500``, ``drop-connection``, ``drop-after-commit``, ``403``, ``409``,
``pull-error``. ``drop-after-commit`` applies the operation and then closes
the connection, which is what a lost response looks like to the client.
``pull-error`` only applies to ``create_job`` and leaves the job's pod stuck
on an image pull, so the job never leaves Pending.
"""

from __future__ import annotations

import copy
import fnmatch
import hashlib
import json
import logging
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Mapping
from urllib.parse import parse_qs, urlsplit

from .cluster import ClusterConfig

log = logging.getLogger(__name__)

OPERATIONS = (
    "create_job",
    "create_configmap",
    "get_job",
    "list_pods",
    "get_log",
    "delete_job",
    "delete_configmap",
)
FAULT_KINDS = ("http-500", "drop-connection", "drop-after-commit", "403", "409", "pull-error")

_ROUTES = [
    ("POST", re.compile(r"^/apis/batch/v1/namespaces/(?P<ns>[^/]+)/jobs$"), "create_job"),
    ("POST", re.compile(r"^/api/v1/namespaces/(?P<ns>[^/]+)/configmaps$"), "create_configmap"),
    ("GET", re.compile(r"^/apis/batch/v1/namespaces/(?P<ns>[^/]+)/jobs/(?P<name>[^/]+)$"), "get_job"),
    ("GET", re.compile(r"^/api/v1/namespaces/(?P<ns>[^/]+)/pods$"), "list_pods"),
    ("GET", re.compile(r"^/api/v1/namespaces/(?P<ns>[^/]+)/pods/(?P<name>[^/]+)/log$"), "get_log"),
    ("DELETE", re.compile(r"^/apis/batch/v1/namespaces/(?P<ns>[^/]+)/jobs/(?P<name>[^/]+)$"), "delete_job"),
    ("DELETE", re.compile(r"^/api/v1/namespaces/(?P<ns>[^/]+)/configmaps/(?P<name>[^/]+)$"), "delete_configmap"),
]


class BindFailed(OSError):
    pass


@dataclass(frozen=True)
class Fault:
    operation: str
    occurrence: int
    kind: str

    def __post_init__(self):
        if self.operation not in OPERATIONS:
            raise ValueError(f"unknown operation {self.operation!r}")
        if self.occurrence < 1:
            raise ValueError("occurrence indices start at 1")
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.kind == "pull-error" and self.operation != "create_job":
            raise ValueError("pull-error only applies to create_job")


@dataclass(frozen=True)
class LifecycleScript:
    pending_polls: int = 0
    running_polls: int = 1
    exit_code: int = 0
    log_text: str = ""
    injected_faults: tuple[Fault, ...] = ()

    def __post_init__(self):
        if self.pending_polls < 0 or self.running_polls < 0:
            raise ValueError("poll counts must be >= 0")
        faults = tuple(f if isinstance(f, Fault) else Fault(*f) for f in self.injected_faults)
        object.__setattr__(self, "injected_faults", faults)

    def phase_at(self, observation: int) -> str:
        """Job phase reported by the ``observation``-th status read (1-based)."""
        if observation <= self.pending_polls:
            return "Pending"
        if observation <= self.pending_polls + self.running_polls:
            return "Active"
        return "Succeeded" if self.exit_code == 0 else "Failed"


@dataclass
class _Job:
    ns: str
    body: dict
    script: LifecycleScript
    pod_name: str
    created: str
    observations: int = 0
    stuck_pulling: bool = False

    @property
    def phase(self) -> str:
        if self.stuck_pulling:
            return "Pending"
        return self.script.phase_at(max(self.observations, 0)) if self.observations else "Pending"


@dataclass
class Snapshot:
    jobs: list[str] = field(default_factory=list)
    configmaps: list[str] = field(default_factory=list)
    request_log: list[tuple[str, str]] = field(default_factory=list)

    def count(self, method: str, pattern: str) -> int:
        rx = re.compile(pattern)
        return sum(1 for m, p in self.request_log if m == method and rx.search(p))

    @property
    def status_reads(self) -> int:
        return self.count("GET", r"^/apis/batch/v1/namespaces/[^/]+/jobs/[^/?]+$")


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _status(code: int, message: str, reason: str = "") -> dict:
    return {
        "kind": "Status",
        "apiVersion": "v1",
        "metadata": {},
        "status": "Success" if code < 300 else "Failure",
        "message": message,
        "reason": reason or HTTPStatus(code).phrase.replace(" ", ""),
        "code": code,
    }


def validate_job(body: dict) -> list[str]:
    """Structural checks on a Job body; returns a list of problems."""
    problems = []
    if body.get("apiVersion") != "batch/v1":
        problems.append("apiVersion must be batch/v1")
    if body.get("kind") != "Job":
        problems.append("kind must be Job")
    if not (body.get("metadata") or {}).get("name"):
        problems.append("metadata.name is required")
    pod = ((body.get("spec") or {}).get("template") or {}).get("spec") or {}
    containers = pod.get("containers") or []
    if len(containers) != 1:
        problems.append("spec.template.spec.containers must hold one container")
    for c in containers:
        for key in ("name", "image", "command"):
            if not c.get(key):
                problems.append(f"container.{key} is required")
        mounts = {m.get("name") for m in c.get("volumeMounts") or []}
        volumes = {v.get("name") for v in pod.get("volumes") or [] if (v.get("configMap") or {}).get("name")}
        if not mounts or not mounts <= volumes:
            problems.append("every volumeMount must reference a configMap volume")
        requests_ = (c.get("resources") or {}).get("requests") or {}
        for k, v in requests_.items():
            if not isinstance(v, str):
                problems.append(f"resource quantity for {k} must be a string")
    if pod.get("restartPolicy") not in ("Never", "OnFailure"):
        problems.append("restartPolicy must be Never or OnFailure")
    return problems


def validate_configmap(body: dict) -> list[str]:
    problems = []
    if body.get("apiVersion") != "v1" or body.get("kind") != "ConfigMap":
        problems.append("expected apiVersion v1, kind ConfigMap")
    if not (body.get("metadata") or {}).get("name"):
        problems.append("metadata.name is required")
    data = body.get("data")
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        problems.append("data must map strings to strings")
    return problems


class _Drop(Exception):
    pass


class FakeCluster:
    """Threaded HTTP server holding jobs, configmaps and pods in memory."""

    def __init__(
        self,
        scripts: Mapping[str, LifecycleScript] | None = None,
        *,
        faults: Iterable[Fault | tuple] = (),
        token: str | None = "fake-token",
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.scripts = dict(scripts or {})
        all_faults = [f if isinstance(f, Fault) else Fault(*f) for f in faults]
        for s in self.scripts.values():
            all_faults.extend(s.injected_faults)
        self._faults = {(f.operation, f.occurrence): f.kind for f in all_faults}
        self.token = token
        self._lock = threading.RLock()
        self._jobs: dict[tuple[str, str], _Job] = {}
        self._configmaps: dict[tuple[str, str], dict] = {}
        self._calls: Counter[str] = Counter()
        self._log: list[tuple[str, str]] = []
        self.created_total: Counter[str] = Counter()
        self.deleted_total: Counter[str] = Counter()
        self.submitted_jobs: list[dict] = []
        try:
            self._server = ThreadingHTTPServer((host, port), self._handler_class())
        except OSError as exc:
            raise BindFailed(f"cannot bind {host}:{port}: {exc}") from exc
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    # lifecycle

    def start(self) -> "FakeCluster":
        self._thread = threading.Thread(
            target=self._server.serve_forever, args=(0.05,), name="fake-cluster", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start() if self._thread is None else self

    def __exit__(self, *exc):
        self.stop()

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def config(self, namespace: str = "default", **kwargs) -> ClusterConfig:
        return ClusterConfig(
            server_url=self.url,
            namespace=namespace,
            context_name="fake",
            token=self.token or "anonymous",
            **kwargs,
        )

    def kubeconfig_yaml(self, namespace: str = "default") -> str:
        return (
            "apiVersion: v1\nkind: Config\n"
            "clusters:\n- name: fake\n  cluster:\n"
            f"    server: {self.url}\n"
            "users:\n- name: fake-user\n  user:\n"
            f"    token: {self.token or 'anonymous'}\n"
            "contexts:\n- name: fake\n  context:\n    cluster: fake\n    user: fake-user\n"
            f"    namespace: {namespace}\n"
            "current-context: fake\n"
        )

    def snapshot(self) -> Snapshot:
        with self._lock:
            return Snapshot(
                jobs=sorted(name for _, name in self._jobs),
                configmaps=sorted(name for _, name in self._configmaps),
                request_log=list(self._log),
            )

    # state machine

    def script_for(self, job_name: str) -> LifecycleScript:
        matches = [p for p in self.scripts if fnmatch.fnmatchcase(job_name, p)]
        if len(matches) > 1:
            raise ValueError(f"job {job_name!r} matches several scripts: {matches}")
        return self.scripts[matches[0]] if matches else LifecycleScript()

    def _fault(self, operation: str) -> str | None:
        self._calls[operation] += 1
        return self._faults.get((operation, self._calls[operation]))

    def _pod_json(self, job: _Job) -> dict:
        phase = job.phase
        pod_phase = {"Pending": "Pending", "Active": "Running", "Succeeded": "Succeeded", "Failed": "Failed"}[phase]
        if job.stuck_pulling:
            state = {"waiting": {"reason": "ErrImagePull", "message": "failed to pull image"}}
        elif phase == "Pending":
            state = {"waiting": {"reason": "ContainerCreating"}}
        elif phase == "Active":
            state = {"running": {"startedAt": job.created}}
        else:
            state = {"terminated": {"exitCode": job.script.exit_code,
                                    "reason": "Completed" if job.script.exit_code == 0 else "Error"}}
        container = job.body["spec"]["template"]["spec"]["containers"][0]
        return {
            "apiVersion": "v1",
            "kind": "Pod",
            "metadata": {
                "name": job.pod_name,
                "namespace": job.ns,
                "labels": {"job-name": job.body["metadata"]["name"]},
            },
            "status": {
                "phase": pod_phase,
                "containerStatuses": [{"name": container["name"], "image": container["image"], "state": state}],
            },
        }

    def _job_json(self, job: _Job) -> dict:
        out = copy.deepcopy(job.body)
        out["metadata"].update(namespace=job.ns, creationTimestamp=job.created)
        phase = job.phase
        if phase == "Pending":
            status = {"active": 1, "ready": 0, "startTime": job.created}
        elif phase == "Active":
            status = {"active": 1, "ready": 1, "startTime": job.created}
        elif phase == "Succeeded":
            status = {"succeeded": 1, "conditions": [{"type": "Complete", "status": "True"}]}
        else:
            status = {"failed": 1, "conditions": [
                {"type": "Failed", "status": "True", "reason": "BackoffLimitExceeded"}]}
        out["status"] = status
        return out

    def handle(self, method: str, raw_path: str, body: bytes, auth: str | None) -> tuple[int, object]:
        """Dispatch one request; returns (status, json-or-text). Raises _Drop."""
        url = urlsplit(raw_path)
        with self._lock:
            self._log.append((method, raw_path))
            for m, rx, op in _ROUTES:
                match = rx.match(url.path) if m == method else None
                if match:
                    break
            else:
                return 404, _status(404, f"no route for {method} {url.path}")
            if self.token is not None and auth != f"Bearer {self.token}":
                return 401, _status(401, "Unauthorized")
            fault = self._fault(op)
            if fault == "http-500":
                return 500, _status(500, "injected internal error")
            if fault == "drop-connection":
                raise _Drop()
            if fault == "403":
                return 403, _status(403, f"{op} is forbidden", "Forbidden")
            if fault == "409":
                return 409, _status(409, "injected conflict", "AlreadyExists")
            args = match.groupdict()
            result = getattr(self, f"_op_{op}")(args, parse_qs(url.query), body, fault)
            if fault == "drop-after-commit":
                raise _Drop()
            return result

    def _parse(self, body: bytes):
        try:
            return json.loads(body or b"null")
        except ValueError:
            return None

    def _op_create_job(self, args, query, body, fault):
        doc = self._parse(body)
        problems = validate_job(doc) if isinstance(doc, dict) else ["body must be a JSON object"]
        if problems:
            return 422, _status(422, "; ".join(problems), "Invalid")
        ns, name = args["ns"], doc["metadata"]["name"]
        if (ns, name) in self._jobs:
            return 409, _status(409, f'jobs.batch "{name}" already exists', "AlreadyExists")
        try:
            script = self.script_for(name)
        except ValueError as exc:
            return 500, _status(500, str(exc))
        pod = f"{name}-{hashlib.sha256(name.encode()).hexdigest()[:5]}"
        self._jobs[(ns, name)] = _Job(ns, doc, script, pod, _now(), stuck_pulling=fault == "pull-error")
        self.created_total["job"] += 1
        self.submitted_jobs.append(copy.deepcopy(doc))
        return 201, self._job_json(self._jobs[(ns, name)])

    def _op_create_configmap(self, args, query, body, fault):
        doc = self._parse(body)
        problems = validate_configmap(doc) if isinstance(doc, dict) else ["body must be a JSON object"]
        if problems:
            return 422, _status(422, "; ".join(problems), "Invalid")
        ns, name = args["ns"], doc["metadata"]["name"]
        if (ns, name) in self._configmaps:
            return 409, _status(409, f'configmaps "{name}" already exists', "AlreadyExists")
        stored = copy.deepcopy(doc)
        stored["metadata"]["namespace"] = ns
        self._configmaps[(ns, name)] = stored
        self.created_total["configmap"] += 1
        return 201, stored

    def _op_get_job(self, args, query, body, fault):
        job = self._jobs.get((args["ns"], args["name"]))
        if job is None:
            return 404, _status(404, f'jobs.batch "{args["name"]}" not found', "NotFound")
        job.observations += 1
        return 200, self._job_json(job)

    def _op_list_pods(self, args, query, body, fault):
        selector = (query.get("labelSelector") or [""])[0]
        wanted = dict(part.split("=", 1) for part in selector.split(",") if "=" in part)
        items = []
        for (ns, _), job in sorted(self._jobs.items()):
            if ns != args["ns"] or not job.observations:
                continue
            pod = self._pod_json(job)
            if all(pod["metadata"]["labels"].get(k) == v for k, v in wanted.items()):
                items.append(pod)
        return 200, {"kind": "PodList", "apiVersion": "v1", "metadata": {}, "items": items}

    def _op_get_log(self, args, query, body, fault):
        for (ns, _), job in self._jobs.items():
            if ns == args["ns"] and job.pod_name == args["name"]:
                if job.phase == "Pending":
                    return 400, _status(400, f'container "quantum-task" in pod "{job.pod_name}" is waiting to start', "BadRequest")
                return 200, job.script.log_text
        return 404, _status(404, f'pods "{args["name"]}" not found', "NotFound")

    def _op_delete_job(self, args, query, body, fault):
        job = self._jobs.pop((args["ns"], args["name"]), None)
        if job is None:
            return 404, _status(404, f'jobs.batch "{args["name"]}" not found', "NotFound")
        self.deleted_total["job"] += 1
        return 200, _status(200, "", "Success")

    def _op_delete_configmap(self, args, query, body, fault):
        cm = self._configmaps.pop((args["ns"], args["name"]), None)
        if cm is None:
            return 404, _status(404, f'configmaps "{args["name"]}" not found', "NotFound")
        self.deleted_total["configmap"] += 1
        return 200, _status(200, "", "Success")

    def _handler_class(self):
        cluster = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def _serve(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                try:
                    code, payload = cluster.handle(self.command, self.path, body, self.headers.get("Authorization"))
                except _Drop:
                    self.close_connection = True
                    return
                if isinstance(payload, str):
                    data, ctype = payload.encode("utf-8"), "text/plain; charset=utf-8"
                else:
                    data, ctype = json.dumps(payload).encode("utf-8"), "application/json"
                self.send_response(code)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            do_GET = do_POST = do_DELETE = _serve

            def log_message(self, fmt, *args):
                log.debug("fake-cluster: " + fmt, *args)

        return Handler


def start(
    scripts: Mapping[str, LifecycleScript] | None = None,
    *,
    faults: Iterable[Fault | tuple] = (),
    token: str | None = "fake-token",
) -> FakeCluster:
    """Start a fake cluster on an ephemeral loopback port."""
    return FakeCluster(scripts, faults=faults, token=token).start()
