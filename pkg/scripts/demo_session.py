"""Run a short notebook-like session against the in-process fake cluster.

Shows the phase timeline per cell, which cells triggered an image build, and
where each cell's output was routed. Nothing leaves the machine: images go to
a recording driver and the cluster is simulated.

    python scripts/demo_session.py
    python scripts/demo_session.py --pending 3 --running 2 --json
"""

import argparse
import json
import random

from q8s.deps import CellSource
from q8s.fake_cluster import FakeCluster, LifecycleScript
from q8s.image import ImageBuilder, RecordingDriver
from q8s.orchestrator import ExecutionOptions, ExecutionPhase, Orchestrator

CELLS = [
    ("bell", "from qiskit import QuantumCircuit\nfrom qiskit_aer import AerSimulator\nprint('bell')\n", 0,
     "counts: {'00': 512, '11': 512}\n"),
    ("bell-again", "from qiskit import QuantumCircuit\nfrom qiskit_aer import AerSimulator\nprint(2)\n", 0,
     "counts: {'00': 498, '11': 526}\n"),
    ("typo", "from qiskit import QuantumCircuit\nqc = QuantumCircuit(2)\nqc.hh(0)\n", 1,
     "Traceback (most recent call last):\nAttributeError: 'QuantumCircuit' object has no attribute 'hh'\n"),
    ("pennylane", "import pennylane as qml\nimport numpy as np\nprint(qml.__version__)\n", 0, "0.38.0\n"),
    ("stdlib-only", "import math\nprint(math.pi)\n", 0, "3.141592653589793\n"),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pending", type=int, default=2, help="status reads each job spends Pending")
    ap.add_argument("--running", type=int, default=3, help="status reads each job spends Running")
    ap.add_argument("--poll-interval", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print full results as JSON")
    args = ap.parse_args(argv)

    driver = RecordingDriver()
    orch = Orchestrator(ImageBuilder(driver), rng=random.Random(args.seed))
    opts = ExecutionOptions(base_image="cuda-base:12", registry="registry.com/user",
                            poll_interval=args.poll_interval, retry_backoff=0.01)
    # every cell gets its own script, keyed by the job name the seeded rng will produce
    probe = random.Random(args.seed)
    scripts = {}
    for _, _, code, logs in CELLS:
        suffix = f"{probe.getrandbits(32):08x}"
        scripts[f"quantum-job-{suffix}"] = LifecycleScript(args.pending, args.running, code, logs)

    results = []
    with FakeCluster(scripts) as cluster:
        for name, text, _, _ in CELLS:
            res = orch.execute_cell(CellSource(text, name), cluster.config(), opts)
            results.append((name, res))
        snap = cluster.snapshot()

    if args.json:
        print(json.dumps([{"cell": n, **r.to_dict()} for n, r in results], indent=2))
        return 0

    for name, res in results:
        built = ExecutionPhase.BUILDING in res.states()
        t0 = res.timeline[0][1]
        steps = " > ".join(f"{p.value}@{(t - t0) * 1000:.0f}ms" for p, t in res.timeline)
        print(f"[{name}] {res.phase.value} exit={res.exit_code} image={res.image_ref.rsplit(':', 1)[1]}"
              f" {'built' if built else 'cached'} polls={res.polls}")
        print(f"    {steps}")
        for stream, text in (("stdout", res.stdout), ("stderr", res.stderr)):
            for line in text.splitlines():
                print(f"    {stream}| {line}")
    print()
    print(f"builds={len(driver.builds)} pushes={len(driver.pushes)} jobs-submitted={len(cluster.submitted_jobs)}")
    print(f"left on cluster: jobs={len(snap.jobs)} configmaps={len(snap.configmaps)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
