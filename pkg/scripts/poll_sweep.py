"""Sweep scripted (pending, running) durations and count status reads per run.

The fake cluster advances one lifecycle step per status read, so the count of
reads is exact. Each row also reports the bound ``pending + running + 2`` and
whether it held. Output is CSV on stdout.

    python scripts/poll_sweep.py --max-pending 6 --max-running 6
"""

import argparse
import csv
import sys

from q8s.deps import CellSource
from q8s.fake_cluster import FakeCluster, LifecycleScript
from q8s.image import ImageBuilder, NullDriver
from q8s.orchestrator import ExecutionOptions, Orchestrator


def measure(pending, running, poll_interval):
    opts = ExecutionOptions(base_image="cuda-base:12", registry="registry.com/user",
                            poll_interval=poll_interval, retry_backoff=0.001)
    with FakeCluster({"*": LifecycleScript(pending, running)}) as cluster:
        res = Orchestrator(ImageBuilder(NullDriver())).execute_cell(CellSource("x"), cluster.config(), opts)
        return res, cluster.snapshot().status_reads


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-pending", type=int, default=5)
    ap.add_argument("--max-running", type=int, default=5)
    ap.add_argument("--poll-interval", type=float, default=0.001)
    args = ap.parse_args(argv)

    out = csv.writer(sys.stdout)
    out.writerow(["pending", "running", "status_reads", "bound", "holds", "outcome"])
    violations = 0
    for p in range(args.max_pending + 1):
        for r in range(args.max_running + 1):
            res, reads = measure(p, r, args.poll_interval)
            bound = p + r + 2
            violations += reads > bound
            out.writerow([p, r, reads, bound, reads <= bound, res.phase.value])
    print(f"# violations: {violations}", file=sys.stderr)
    return 1 if violations else 0


if __name__ == "__main__":
    raise SystemExit(main())
