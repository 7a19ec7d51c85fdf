"""Randomized fault injection: does every run still leave the cluster empty?

Each trial draws a lifecycle script and a handful of (operation, occurrence,
kind) faults from a seeded RNG, runs one cell, and checks that no Job or
ConfigMap survives. Faults that hit the deletes themselves are excluded unless
``--include-delete-faults`` is given, since a persistent delete failure is
reported rather than hidden and necessarily leaves an object behind.

    python scripts/fault_sweep.py --trials 200 --seed 1
"""

import argparse
import collections
import random

from q8s.deps import CellSource
from q8s.fake_cluster import FAULT_KINDS, OPERATIONS, FakeCluster, Fault, LifecycleScript
from q8s.image import ImageBuilder, RecordingDriver
from q8s.orchestrator import ExecutionOptions, Orchestrator


def draw(rng, include_delete):
    ops = [o for o in OPERATIONS if include_delete or not o.startswith("delete")]
    faults = []
    for _ in range(rng.randint(0, 4)):
        op = rng.choice(ops)
        kinds = [k for k in FAULT_KINDS if k != "pull-error" or op == "create_job"]
        faults.append(Fault(op, rng.randint(1, 4), rng.choice(kinds)))
    # one fault per (operation, occurrence)
    faults = list({(f.operation, f.occurrence): f for f in faults}.values())
    script = LifecycleScript(rng.randint(0, 3), rng.randint(0, 3), rng.choice([0, 0, 1, 137]), "log\n")
    return script, faults


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--include-delete-faults", action="store_true")
    args = ap.parse_args(argv)

    rng = random.Random(args.seed)
    opts = ExecutionOptions(base_image="cuda-base:12", registry="registry.com/user",
                            poll_interval=0.001, timeout=0.5, retry_backoff=0.001)
    outcomes = collections.Counter()
    leaks = []
    for trial in range(args.trials):
        script, faults = draw(rng, args.include_delete_faults)
        driver = RecordingDriver(fail_builds=int(rng.random() < 0.05), fail_pushes=int(rng.random() < 0.05))
        with FakeCluster({"*": script}, faults=faults) as cluster:
            res = Orchestrator(ImageBuilder(driver), rng=random.Random(trial)).execute_cell(
                CellSource("import numpy\nprint(1)\n"), cluster.config(), opts
            )
            snap = cluster.snapshot()
        key = res.phase.value + (f"@{res.failed_phase.value}" if res.failed_phase else "")
        outcomes[key] += 1
        if snap.jobs or snap.configmaps:
            leaks.append((trial, key, faults, snap.jobs, snap.configmaps))

    for key, n in sorted(outcomes.items(), key=lambda kv: -kv[1]):
        print(f"{n:5d}  {key}")
    print(f"trials={args.trials} leaks={len(leaks)}")
    for trial, key, faults, jobs, cms in leaks[:10]:
        print(f"  trial {trial}: {key} faults={[(f.operation, f.occurrence, f.kind) for f in faults]}"
              f" jobs={jobs} configmaps={cms}")
    return 1 if leaks and not args.include_delete_faults else 0


if __name__ == "__main__":
    raise SystemExit(main())
