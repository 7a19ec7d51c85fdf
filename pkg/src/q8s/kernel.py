"""Notebook kernel front end speaking the standard messaging protocol over ZeroMQ.

Cells arriving on the shell channel are executed one at a time as cluster
Jobs. The control channel stays responsive while a Job runs, so interrupts
abort the run, and a dedicated thread echoes heartbeats throughout.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import threading
import uuid
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import zmq

from . import __version__
from .cluster import ClusterConfig
from .deps import CellSource
from .orchestrator import ExecutionOptions, ExecutionResult, Orchestrator, Outcome, RunHandle

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "5.3"
IMPLEMENTATION = "q8s_kernel"
DISPLAY_NAME = "Python Q8s kernel"
DELIM = b"<IDS|MSG>"

LANGUAGE_INFO = {
    "name": "python",
    "version": "3.10",
    "mimetype": "text/x-python",
    "file_extension": ".py",
    "pygments_lexer": "ipython3",
    "codemirror_mode": {"name": "ipython", "version": 3},
    "nbconvert_exporter": "python",
}
BANNER = (
    "Python Q8s kernel: each cell runs as a Kubernetes Job on a GPU node.\n"
    "Variables do not persist between cells."
)


class BindFailed(OSError):
    pass


class SignatureInvalid(ValueError):
    pass


@dataclass(frozen=True)
class ConnectionInfo:
    ip: str
    shell_port: int
    iopub_port: int
    stdin_port: int
    control_port: int
    hb_port: int
    key: bytes
    transport: str = "tcp"
    signature_scheme: str = "hmac-sha256"
    kernel_name: str = ""

    def __post_init__(self):
        if self.transport != "tcp":
            raise ValueError(f"unsupported transport {self.transport!r}")
        if self.signature_scheme != "hmac-sha256":
            raise ValueError(f"unsupported signature scheme {self.signature_scheme!r}")
        if not self.key:
            raise ValueError("connection key must be non-empty")
        ports = [p for p in self.ports.values() if p]
        if len(set(ports)) != len(ports):
            raise ValueError("channel ports must be distinct")

    @property
    def ports(self) -> dict[str, int]:
        return {
            "shell": self.shell_port,
            "iopub": self.iopub_port,
            "stdin": self.stdin_port,
            "control": self.control_port,
            "hb": self.hb_port,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConnectionInfo":
        key = d.get("key", "")
        return cls(
            ip=d["ip"],
            shell_port=int(d["shell_port"]),
            iopub_port=int(d["iopub_port"]),
            stdin_port=int(d["stdin_port"]),
            control_port=int(d["control_port"]),
            hb_port=int(d["hb_port"]),
            key=key.encode() if isinstance(key, str) else bytes(key),
            transport=d.get("transport", "tcp"),
            signature_scheme=d.get("signature_scheme", "hmac-sha256"),
            kernel_name=d.get("kernel_name", ""),
        )

    def to_dict(self) -> dict:
        return {
            "transport": self.transport,
            "ip": self.ip,
            **{f"{name}_port": port for name, port in self.ports.items()},
            "key": self.key.decode(),
            "signature_scheme": self.signature_scheme,
            "kernel_name": self.kernel_name,
        }


def load_connection_file(path: str | Path) -> ConnectionInfo:
    return ConnectionInfo.from_dict(json.loads(Path(path).read_text()))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Session:
    """Signs, packs and unpacks protocol messages."""

    def __init__(self, key: bytes, username: str = "q8s"):
        self.key = key
        self.session_id = uuid.uuid4().hex
        self.username = username

    def sign(self, parts: list[bytes]) -> bytes:
        mac = hmac.new(self.key, digestmod=hashlib.sha256)
        for p in parts:
            mac.update(p)
        return mac.hexdigest().encode()

    def header(self, msg_type: str) -> dict:
        return {
            "msg_id": uuid.uuid4().hex,
            "session": self.session_id,
            "username": self.username,
            "date": _now(),
            "msg_type": msg_type,
            "version": PROTOCOL_VERSION,
        }

    def pack(
        self,
        msg_type: str,
        content: dict,
        parent: dict | None = None,
        idents: list[bytes] | None = None,
        metadata: dict | None = None,
    ) -> list[bytes]:
        parts = [
            json.dumps(self.header(msg_type)).encode(),
            json.dumps(parent or {}).encode(),
            json.dumps(metadata or {}).encode(),
            json.dumps(content, default=str).encode(),
        ]
        return [*(idents or []), DELIM, self.sign(parts), *parts]

    def unpack(self, frames: list[bytes]) -> tuple[list[bytes], dict]:
        try:
            i = frames.index(DELIM)
        except ValueError:
            raise SignatureInvalid("missing delimiter") from None
        idents, signature, parts = frames[:i], frames[i + 1], frames[i + 2 : i + 6]
        if len(parts) != 4:
            raise SignatureInvalid("truncated message")
        if not hmac.compare_digest(signature, self.sign(parts)):
            raise SignatureInvalid("bad signature")
        header, parent, metadata, content = (json.loads(p) for p in parts)
        msg = {
            "header": header,
            "parent_header": parent,
            "metadata": metadata,
            "content": content,
            "buffers": frames[i + 6 :],
        }
        return idents, msg


class Engine:
    """Binds an orchestrator to the cluster and options a kernel session uses.

    ``cfg`` may be None when the kubeconfig could not be loaded; every
    execution then fails fast with ``config_error`` as its message.
    """

    def __init__(
        self,
        orchestrator: Orchestrator,
        cfg: ClusterConfig | None,
        opts: ExecutionOptions,
        config_error: str = "",
    ):
        self.orchestrator = orchestrator
        self.cfg = cfg
        self.opts = opts
        self.config_error = config_error

    def submit(self, cell: CellSource) -> RunHandle:
        if self.cfg is None:
            handle = RunHandle(cell)
            handle._finish(ExecutionResult(phase=Outcome.INFRA_ERROR, message=self.config_error))
            return handle
        return self.orchestrator.submit(cell, self.cfg, self.opts)

    def abort(self, handle: RunHandle) -> None:
        self.orchestrator.abort(handle)


def _error_content(result: ExecutionResult) -> dict:
    if result.phase is Outcome.FAILED:
        ename = "RemoteExecutionError"
    else:
        ename = result.phase.value
    evalue = result.message or ename
    return {"ename": ename, "evalue": evalue, "traceback": [f"{ename}: {evalue}"]}


@dataclass
class _Pending:
    socket: zmq.Socket
    idents: list[bytes]
    msg: dict


class KernelServer:
    def __init__(self, conn: ConnectionInfo, engine: Engine, context: zmq.Context | None = None):
        self.conn = conn
        self.engine = engine
        self.session = Session(conn.key)
        self.ctx = context or zmq.Context.instance()
        self.execution_count = 0
        self._stop = threading.Event()
        self._queue: deque[_Pending] = deque()
        self._current: tuple[_Pending, RunHandle] | None = None
        self._threads: list[threading.Thread] = []
        self._bound = False
        self.ports: dict[str, int] = {}

    # sockets

    def _bind(self, kind: int, name: str) -> zmq.Socket:
        sock = self.ctx.socket(kind)
        sock.linger = 1000
        addr = f"{self.conn.transport}://{self.conn.ip}"
        port = self.conn.ports[name]
        try:
            if port:
                sock.bind(f"{addr}:{port}")
            else:
                port = sock.bind_to_random_port(addr)
        except zmq.ZMQError as exc:
            sock.close(0)
            raise BindFailed(f"cannot bind {name} channel on {addr}:{port}: {exc}") from exc
        self.ports[name] = port
        return sock

    def bind(self) -> None:
        if self._bound:
            return
        made = []
        try:
            for attr, kind, name in (
                ("shell", zmq.ROUTER, "shell"),
                ("control", zmq.ROUTER, "control"),
                ("stdin", zmq.ROUTER, "stdin"),
                ("iopub", zmq.PUB, "iopub"),
                ("hb", zmq.REP, "hb"),
            ):
                sock = self._bind(kind, name)
                made.append(sock)
                setattr(self, attr, sock)
        except BindFailed:
            for s in made:
                s.close(0)
            raise
        self._bound = True

    def connection_info(self) -> ConnectionInfo:
        """The connection info with any ephemeral ports resolved."""
        self.bind()
        return ConnectionInfo(
            ip=self.conn.ip,
            key=self.conn.key,
            kernel_name=self.conn.kernel_name,
            **{f"{n}_port": p for n, p in self.ports.items()},
        )

    # heartbeat

    def _heartbeat(self) -> None:
        poller = zmq.Poller()
        poller.register(self.hb, zmq.POLLIN)
        while not self._stop.is_set():
            if poller.poll(50):
                self.hb.send(self.hb.recv())

    # messaging helpers

    def publish(self, msg_type: str, content: dict, parent: dict | None) -> None:
        self.iopub.send_multipart(self.session.pack(msg_type, content, parent, [msg_type.encode()]))

    def status(self, state: str, parent: dict | None) -> None:
        self.publish("status", {"execution_state": state}, parent)

    def reply(self, pending: _Pending, msg_type: str, content: dict) -> None:
        header = pending.msg["header"]
        pending.socket.send_multipart(
            self.session.pack(msg_type, content, header, pending.idents, {"status": content.get("status")})
        )

    def _recv(self, sock: zmq.Socket) -> _Pending | None:
        frames = sock.recv_multipart()
        try:
            idents, msg = self.session.unpack(frames)
        except (SignatureInvalid, ValueError) as exc:
            log.warning("dropping message: %s", exc)
            return None
        return _Pending(sock, idents, msg)

    # request handlers

    def kernel_info_content(self) -> dict:
        return {
            "status": "ok",
            "protocol_version": PROTOCOL_VERSION,
            "implementation": IMPLEMENTATION,
            "implementation_version": __version__,
            "language_info": LANGUAGE_INFO,
            "banner": BANNER,
            "help_links": [],
        }

    def _simple_reply(self, p: _Pending) -> bool:
        """Answer non-execute requests; returns False for unknown types."""
        msg_type = p.msg["header"].get("msg_type", "")
        content = p.msg["content"]
        if msg_type == "kernel_info_request":
            out = self.kernel_info_content()
        elif msg_type == "is_complete_request":
            out = {"status": "complete"}
        elif msg_type == "complete_request":
            pos = content.get("cursor_pos", 0)
            out = {"status": "ok", "matches": [], "cursor_start": pos, "cursor_end": pos, "metadata": {}}
        elif msg_type == "inspect_request":
            out = {"status": "ok", "found": False, "data": {}, "metadata": {}}
        elif msg_type == "history_request":
            out = {"status": "ok", "history": []}
        elif msg_type == "comm_info_request":
            out = {"status": "ok", "comms": {}}
        else:
            log.info("ignoring unsupported request %s", msg_type)
            return False
        self.reply(p, msg_type.replace("_request", "_reply"), out)
        return True

    def _start_next(self) -> None:
        while self._current is None and self._queue:
            p = self._queue.popleft()
            parent = p.msg["header"]
            msg_type = parent.get("msg_type")
            self.status("busy", parent)
            if msg_type == "execute_request":
                if not p.msg["content"].get("silent", False):
                    self.execution_count += 1
                cell = CellSource(p.msg["content"].get("code", ""), parent.get("msg_id") or uuid.uuid4().hex)
                self._current = (p, self.engine.submit(cell))
                return
            if msg_type == "shutdown_request":
                self._shutdown(p)
            else:
                self._simple_reply(p)
            self.status("idle", parent)

    def _finish_current(self) -> None:
        p, handle = self._current
        self._current = None
        result = handle.result()
        parent = p.msg["header"]
        for name, text in (("stdout", result.stdout), ("stderr", result.stderr)):
            if text:
                self.publish("stream", {"name": name, "text": text}, parent)
        if result.ok:
            content = {"status": "ok", "execution_count": self.execution_count,
                       "payload": [], "user_expressions": {}}
        else:
            err = _error_content(result)
            self.publish("error", {**err, "execution_count": self.execution_count}, parent)
            content = {"status": "error", "execution_count": self.execution_count, **err}
        self.reply(p, "execute_reply", content)
        self.status("idle", parent)

    def _abort_queued(self) -> None:
        while self._queue:
            p = self._queue.popleft()
            if p.msg["header"].get("msg_type") != "execute_request":
                continue
            self.status("busy", p.msg["header"])
            self.reply(p, "execute_reply", {"status": "aborted", "execution_count": self.execution_count})
            self.status("idle", p.msg["header"])

    def _shutdown(self, p: _Pending) -> None:
        if self._current:
            self.engine.abort(self._current[1])
            self._finish_current()
        self._abort_queued()
        self.reply(p, "shutdown_reply", {"status": "ok", "restart": p.msg["content"].get("restart", False)})
        self._stop.set()

    def _on_control(self, p: _Pending) -> None:
        msg_type = p.msg["header"].get("msg_type")
        if msg_type == "interrupt_request":
            if self._current:
                self.engine.abort(self._current[1])
            self.reply(p, "interrupt_reply", {"status": "ok"})
        elif msg_type == "shutdown_request":
            self._shutdown(p)
        else:
            self._simple_reply(p)

    # main loop

    def serve_forever(self) -> None:
        self.bind()
        hb = threading.Thread(target=self._heartbeat, name="q8s-heartbeat", daemon=True)
        hb.start()
        self._threads.append(hb)
        poller = zmq.Poller()
        for sock in (self.control, self.shell, self.stdin):
            poller.register(sock, zmq.POLLIN)
        log.info("kernel listening on %s", self.ports)
        try:
            while not self._stop.is_set():
                events = dict(poller.poll(20 if self._current else 100))
                if self.control in events:
                    p = self._recv(self.control)
                    if p:
                        self._on_control(p)
                if self._stop.is_set():
                    break
                if self.shell in events:
                    p = self._recv(self.shell)
                    if p:
                        self._queue.append(p)
                if self.stdin in events:
                    self.stdin.recv_multipart()
                if self._current and self._current[1].done():
                    self._finish_current()
                self._start_next()
        finally:
            self._stop.set()
            hb.join(timeout=2)
            self.close()

    def start(self) -> "KernelServer":
        """Run ``serve_forever`` on a background thread."""
        self.bind()
        t = threading.Thread(target=self.serve_forever, name="q8s-kernel", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout)

    def close(self) -> None:
        if not self._bound:
            return
        for name in ("shell", "control", "stdin", "iopub", "hb"):
            getattr(self, name).close(0)
        self._bound = False


def serve(conn: ConnectionInfo, engine: Engine) -> None:
    """Run a kernel until a shutdown request arrives."""
    KernelServer(conn, engine).serve_forever()


def kernelspec(argv: list[str]) -> dict[str, Any]:
    return {
        "argv": argv,
        "display_name": DISPLAY_NAME,
        "language": "python",
        "interrupt_mode": "message",
        "metadata": {"debugger": False},
    }
