import hashlib
import hmac
import json
import os
import subprocess
import sys
import time
import uuid
from datetime import datetime

import pytest
import zmq
from jupyter_client import BlockingKernelClient

from conftest import fast_options
from q8s.fake_cluster import LifecycleScript
from q8s.image import ImageBuilder, RecordingDriver
from q8s.kernel import (
    DELIM,
    DISPLAY_NAME,
    BindFailed,
    ConnectionInfo,
    Engine,
    KernelServer,
    Session,
    SignatureInvalid,
    kernelspec,
)
from q8s.orchestrator import Orchestrator

FOREVER = 10**9


def blank_conn(key=None):
    return ConnectionInfo(ip="127.0.0.1", shell_port=0, iopub_port=0, stdin_port=0, control_port=0,
                          hb_port=0, key=key or uuid.uuid4().hex.encode())


def connect(info: ConnectionInfo) -> BlockingKernelClient:
    client = BlockingKernelClient()
    client.load_connection_info(info.to_dict())
    client.start_channels()
    client.wait_for_ready(timeout=10)
    return client


@pytest.fixture
def kernel(make_cluster):
    """Start an in-process kernel bound to a fake cluster; yields (client, server, cluster)."""
    started = []

    def factory(script=None, *, cfg=None, config_error="", **opts):
        cluster = make_cluster(script or LifecycleScript(0, 1, 0, "hello\n"))
        orch = Orchestrator(ImageBuilder(RecordingDriver()))
        engine = Engine(orch, cluster.config() if cfg is None else cfg, fast_options(**opts), config_error)
        if config_error:
            engine.cfg = None
        server = KernelServer(blank_conn(), engine, context=zmq.Context()).start()
        client = connect(server.connection_info())
        started.append((client, server))
        return client, server, cluster

    yield factory
    for client, server in started:
        client.stop_channels()
        server.stop()


def iopub_for(client, msg_id, timeout=10):
    """Collect iopub messages for one request until the kernel reports idle."""
    out = []
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        msg = client.get_iopub_msg(timeout=deadline - time.monotonic())
        if msg["parent_header"].get("msg_id") != msg_id:
            continue
        out.append(msg)
        if msg["msg_type"] == "status" and msg["content"]["execution_state"] == "idle":
            return out
    raise AssertionError(f"no idle for {msg_id}: {out}")


def stamp(msg) -> datetime:
    date = msg["header"]["date"]
    return date if isinstance(date, datetime) else datetime.fromisoformat(date.replace("Z", "+00:00"))


def summary(msgs):
    return [
        (m["msg_type"], m["content"].get("execution_state") or m["content"].get("name"))
        for m in msgs
    ]


def test_kernel_info(kernel):
    client, _, _ = kernel()
    reply = client.kernel_info(reply=True, timeout=5)
    assert reply["content"]["protocol_version"] == "5.3"
    assert reply["content"]["implementation"] == "q8s_kernel"
    assert reply["content"]["language_info"]["name"] == "python"
    assert reply["header"]["version"] == "5.3"


def test_execute_success_message_order(kernel):
    client, _, _ = kernel(LifecycleScript(1, 1, 0, "counts: {'00': 512, '11': 512}"))
    msg_id = client.execute("print('bell')")
    reply = client.get_shell_msg(timeout=10)
    msgs = iopub_for(client, msg_id)
    assert reply["content"]["status"] == "ok" and reply["content"]["execution_count"] == 1
    assert summary(msgs) == [("status", "busy"), ("stream", "stdout"), ("status", "idle")]
    assert msgs[1]["content"]["text"] == "counts: {'00': 512, '11': 512}"
    # the reply is sent after the stream and before idle
    assert stamp(msgs[0]) <= stamp(msgs[1]) <= stamp(reply) <= stamp(msgs[2])


def test_execute_failure_sends_stderr_and_error(kernel):
    client, _, _ = kernel(LifecycleScript(0, 1, 2, "Traceback\nKeyError: 'x'\n"))
    msg_id = client.execute("d = {}\nd['x']")
    reply = client.get_shell_msg(timeout=10)
    msgs = iopub_for(client, msg_id)
    assert reply["content"]["status"] == "error"
    assert summary(msgs) == [("status", "busy"), ("stream", "stderr"), ("error", None), ("status", "idle")]
    assert "code 2" in reply["content"]["evalue"]


def test_empty_code_still_completes(kernel):
    client, _, cluster = kernel(LifecycleScript(0, 0, 0, ""))
    msg_id = client.execute("")
    reply = client.get_shell_msg(timeout=10)
    msgs = iopub_for(client, msg_id)
    assert reply["content"]["status"] == "ok"
    assert summary(msgs) == [("status", "busy"), ("status", "idle")]
    assert cluster.submitted_jobs


def test_queued_requests_run_in_order(kernel):
    client, _, cluster = kernel(LifecycleScript(1, 1, 0, "x"))
    ids = [client.execute(f"print({i})") for i in range(3)]
    replies = [client.get_shell_msg(timeout=10) for _ in ids]
    assert [r["parent_header"]["msg_id"] for r in replies] == ids
    assert [r["content"]["execution_count"] for r in replies] == [1, 2, 3]
    assert len(cluster.submitted_jobs) == 3


def test_interrupt_during_pending(kernel):
    client, server, cluster = kernel(LifecycleScript(pending_polls=FOREVER), poll_interval=0.02)
    msg_id = client.execute("print(1)")
    deadline = time.monotonic() + 5
    while not cluster.snapshot().jobs and time.monotonic() < deadline:
        time.sleep(0.01)
    client.control_channel.send(client.session.msg("interrupt_request", {}))
    ctl = client.get_control_msg(timeout=5)
    assert ctl["msg_type"] == "interrupt_reply"
    reply = client.get_shell_msg(timeout=10)
    assert reply["parent_header"]["msg_id"] == msg_id
    assert reply["content"]["status"] == "error" and reply["content"]["ename"] == "Aborted"
    iopub_for(client, msg_id)
    snap = cluster.snapshot()
    assert snap.jobs == [] and snap.configmaps == []


def test_heartbeat_while_pending(kernel):
    client, server, cluster = kernel(LifecycleScript(pending_polls=FOREVER), poll_interval=0.02)
    client.execute("print(1)")
    ctx = zmq.Context()
    sock = ctx.socket(zmq.REQ)
    sock.linger = 0
    sock.connect(f"tcp://127.0.0.1:{server.ports['hb']}")
    worst = 0.0
    try:
        for _ in range(10):
            t0 = time.perf_counter()
            sock.send(b"ping")
            assert sock.poll(2000), "heartbeat did not answer"
            assert sock.recv() == b"ping"
            worst = max(worst, time.perf_counter() - t0)
            time.sleep(0.02)
    finally:
        sock.close()
        ctx.term()
    assert worst < 0.5
    client.control_channel.send(client.session.msg("interrupt_request", {}))
    assert client.get_shell_msg(timeout=10)["content"]["status"] == "error"


def test_bad_signature_is_dropped(kernel):
    client, server, _ = kernel()
    ctx = zmq.Context()
    sock = ctx.socket(zmq.DEALER)
    sock.linger = 0
    sock.connect(f"tcp://127.0.0.1:{server.ports['shell']}")
    forger = Session(b"not-the-key")
    sock.send_multipart(forger.pack("execute_request", {"code": "print(1)", "silent": False}))
    time.sleep(0.2)
    assert not sock.poll(100)
    sock.close()
    ctx.term()
    assert server.execution_count == 0
    # the kernel is still healthy
    assert client.kernel_info(reply=True, timeout=5)["content"]["status"] == "ok"


def test_replies_carry_valid_hmac(kernel):
    client, server, _ = kernel()
    key = server.conn.key
    ctx = zmq.Context()
    sock = ctx.socket(zmq.DEALER)
    sock.linger = 0
    sock.connect(f"tcp://127.0.0.1:{server.ports['shell']}")
    try:
        sock.send_multipart(Session(key).pack("kernel_info_request", {}))
        assert sock.poll(5000)
        frames = sock.recv_multipart()
    finally:
        sock.close()
        ctx.term()
    i = frames.index(DELIM)
    expected = hmac.new(key, b"".join(frames[i + 2 : i + 6]), hashlib.sha256).hexdigest().encode()
    assert frames[i + 1] == expected
    assert json.loads(frames[i + 2])["msg_type"] == "kernel_info_reply"
    tampered = frames[:-1] + [b'{"status": "error"}']
    with pytest.raises(SignatureInvalid):
        Session(key).unpack(tampered)


def test_no_cluster_config_reports_infra_error(kernel):
    client, _, _ = kernel(config_error="kubeconfig not found: /nope")
    client.execute("print(1)")
    reply = client.get_shell_msg(timeout=10)
    assert reply["content"]["status"] == "error"
    assert reply["content"]["ename"] == "InfraError"
    assert "/nope" in reply["content"]["evalue"]


def test_misc_requests(kernel):
    client, _, _ = kernel()

    def ask(msg_id):
        reply = client.get_shell_msg(timeout=5)
        assert reply["parent_header"]["msg_id"] == msg_id
        return reply["content"]

    assert ask(client.is_complete("x = 1"))["status"] == "complete"
    assert ask(client.complete("imp"))["matches"] == []
    assert ask(client.inspect("x"))["found"] is False
    assert ask(client.comm_info())["comms"] == {}
    assert ask(client.history())["history"] == []


def test_shutdown_aborts_running_cell(kernel):
    client, server, cluster = kernel(LifecycleScript(pending_polls=FOREVER), poll_interval=0.02)
    msg_id = client.execute("print(1)")
    queued = client.execute("print(2)")
    deadline = time.monotonic() + 5
    while not cluster.snapshot().jobs and time.monotonic() < deadline:
        time.sleep(0.01)
    client.shutdown()
    replies = {}
    for _ in range(2):
        m = client.get_shell_msg(timeout=10)
        replies[m["parent_header"]["msg_id"]] = m["content"]["status"]
    assert replies == {msg_id: "error", queued: "aborted"}
    assert client.get_control_msg(timeout=5)["msg_type"] == "shutdown_reply"
    server.stop()
    assert not server._bound
    snap = cluster.snapshot()
    assert snap.jobs == [] and snap.configmaps == []


def test_bind_failed_on_taken_port():
    first = KernelServer(blank_conn(), Engine(Orchestrator(ImageBuilder(RecordingDriver())), None, fast_options()))
    first.bind()
    try:
        taken = first.ports["shell"]
        conn = ConnectionInfo(ip="127.0.0.1", shell_port=taken, iopub_port=0, stdin_port=0, control_port=0,
                              hb_port=0, key=b"k")
        second = KernelServer(conn, first.engine)
        with pytest.raises(BindFailed, match="shell"):
            second.bind()
    finally:
        first.close()


def test_connection_info_validation():
    with pytest.raises(ValueError):
        ConnectionInfo("127.0.0.1", 1, 1, 2, 3, 4, b"k")
    with pytest.raises(ValueError):
        ConnectionInfo("127.0.0.1", 1, 2, 3, 4, 5, b"")
    with pytest.raises(ValueError):
        ConnectionInfo("127.0.0.1", 1, 2, 3, 4, 5, b"k", signature_scheme="hmac-md5")
    info = ConnectionInfo("127.0.0.1", 1, 2, 3, 4, 5, b"k")
    assert ConnectionInfo.from_dict(json.loads(json.dumps(info.to_dict()))) == info


def test_session_rejects_unframed():
    s = Session(b"k")
    with pytest.raises(SignatureInvalid):
        s.unpack([b"a", b"b"])
    frames = s.pack("x", {})
    assert frames[0] == DELIM
    with pytest.raises(SignatureInvalid):
        s.unpack(frames[:4])


def test_kernelspec_document():
    spec = kernelspec(["python", "-m", "q8s", "kernel", "{connection_file}"])
    assert spec["display_name"] == DISPLAY_NAME == "Python Q8s kernel"
    assert spec["language"] == "python"
    assert "{connection_file}" in spec["argv"]


def test_kernel_subprocess_end_to_end(make_cluster, tmp_path):
    cluster = make_cluster(LifecycleScript(1, 1, 0, "from the cluster\n"))
    kubeconfig = tmp_path / "config"
    kubeconfig.write_text(cluster.kubeconfig_yaml())
    conn = blank_conn()
    # pick concrete ports so the file can be handed to the subprocess
    probe = KernelServer(conn, None, context=zmq.Context())
    info = probe.connection_info()
    probe.close()
    conn_file = tmp_path / "kernel.json"
    conn_file.write_text(json.dumps(info.to_dict()))
    env = {**os.environ, "KUBECONFIG": str(kubeconfig), "Q8S_BUILDER": "none"}
    proc = subprocess.Popen(
        [sys.executable, "-m", "q8s", "kernel", "--poll-interval", "0.02", str(conn_file)],
        env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
    )
    client = None
    try:
        client = connect(info)
        msg_id = client.execute("import qiskit\nprint('hi')")
        reply = client.get_shell_msg(timeout=20)
        assert reply["content"]["status"] == "ok"
        streams = [m for m in iopub_for(client, msg_id) if m["msg_type"] == "stream"]
        assert streams[0]["content"]["text"] == "from the cluster\n"
        client.shutdown()
        assert proc.wait(timeout=10) == 0
    finally:
        if client:
            client.stop_channels()
        if proc.poll() is None:
            proc.kill()
            proc.wait()
