"""Drive the notebook kernel with a stock Jupyter client and print the message flow.

Starts the kernel in-process against the fake cluster, executes a few cells,
prints every iopub/shell message in the order the kernel sent it,
and reports heartbeat round-trip latency sampled while jobs were in flight.

    python scripts/kernel_trace.py --pending 20
"""

import argparse
import queue
import random
import statistics
import threading
import time
import uuid

import zmq
from jupyter_client import BlockingKernelClient

from q8s.fake_cluster import FakeCluster, LifecycleScript
from q8s.image import ImageBuilder, RecordingDriver
from q8s.kernel import ConnectionInfo, Engine, KernelServer
from q8s.manifests import new_suffix
from q8s.orchestrator import ExecutionOptions, Orchestrator

# (code, exit code, log text) per cell
CELLS = [
    ("from qiskit import QuantumCircuit\nprint('hello')\n", 0, "hello\n"),
    ("raise RuntimeError('boom')\n", 1, "Traceback (most recent call last):\nRuntimeError: boom\n"),
]


def ping_loop(port, halt, samples):
    ctx = zmq.Context()
    sock = ctx.socket(zmq.REQ)
    sock.linger = 0
    sock.connect(f"tcp://127.0.0.1:{port}")
    while not halt.is_set():
        t0 = time.perf_counter()
        sock.send(b"ping")
        if not sock.poll(2000):
            samples.append(float("inf"))
            break
        sock.recv()
        samples.append(time.perf_counter() - t0)
        time.sleep(0.01)
    sock.close()
    ctx.term()


def finished(seen):
    """True once both the shell reply and the closing idle status arrived."""
    kinds = {m["msg_type"] for _, m in seen}
    idle = any(m["content"].get("execution_state") == "idle" for _, m in seen)
    return idle and "execute_reply" in kinds


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pending", type=int, default=10)
    ap.add_argument("--running", type=int, default=3)
    ap.add_argument("--poll-interval", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    # the orchestrator's seeded rng decides job names, so each cell can get its own script
    probe = random.Random(args.seed)
    scripts = {f"quantum-job-{new_suffix(probe)}": LifecycleScript(args.pending, args.running, code, logs)
               for _, code, logs in CELLS}
    conn = ConnectionInfo("127.0.0.1", 0, 0, 0, 0, 0, uuid.uuid4().hex.encode())
    with FakeCluster(scripts) as cluster:
        opts = ExecutionOptions(base_image="cuda-base:12", registry="registry.com/user",
                                poll_interval=args.poll_interval)
        orch = Orchestrator(ImageBuilder(RecordingDriver()), rng=random.Random(args.seed))
        server = KernelServer(conn, Engine(orch, cluster.config(), opts))
        server.start()
        client = BlockingKernelClient()
        client.load_connection_info(server.connection_info().to_dict())
        client.start_channels()
        client.wait_for_ready(timeout=10)

        halt, samples = threading.Event(), []
        hb = threading.Thread(target=ping_loop, args=(server.ports["hb"], halt, samples), daemon=True)
        hb.start()
        start = time.time()
        for code, _, _ in CELLS:
            msg_id = client.execute(code)
            seen = []
            while not finished(seen):
                for chan, get in (("iopub", client.get_iopub_msg), ("shell", client.get_shell_msg)):
                    try:
                        msg = get(timeout=0.05)
                    except queue.Empty:
                        continue
                    if msg["parent_header"].get("msg_id") == msg_id:
                        seen.append((chan, msg))
            # channels are independent sockets; order by the kernel's send time
            for chan, msg in sorted(seen, key=lambda cm: cm[1]["header"]["date"]):
                c = msg["content"]
                detail = c.get("execution_state") or c.get("name") or c.get("status") or ""
                text = c.get("text", c.get("evalue", "")).strip().replace("\n", " | ")
                at = msg["header"]["date"].timestamp() - start
                print(f"{at:7.3f}s {chan:5s} {msg['msg_type']:15s} {detail:7s} {text}")
        halt.set()
        hb.join(5)
        client.shutdown()
        client.stop_channels()
        server.stop()

    finite = [s for s in samples if s != float("inf")]
    print(f"heartbeat: n={len(samples)} median={statistics.median(finite) * 1000:.2f}ms "
          f"max={max(samples) * 1000:.2f}ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
