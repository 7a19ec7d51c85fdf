"""End-to-end execution of one cell as a cluster Job.

Each run walks a fixed sequence of phases::

    Preparing -> Building -> Pushing -> Submitting -> Pending -> Running
              -> Collecting -> CleaningUp -> Done

Building and Pushing are skipped when the image digest is already cached,
and any phase may jump straight to CleaningUp on error, timeout or abort.
Whatever the outcome, every object the run created on the cluster is
deleted before the run reports Done.
"""

from __future__ import annotations

import enum
import logging
import random
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .cluster import ApiError, ApiUnavailable, ClusterClient, ClusterConfig, Conflict, JobPhase, NotFound
from .deps import CellSource, analyze
from .image import BuildFailed, ImageBuilder, InvalidReference, PushFailed, build_spec
from .manifests import make_manifests, new_suffix

log = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL = 2.0
DEFAULT_TIMEOUT = 3600.0
DEFAULT_RETRIES = 5
DEFAULT_BACKOFF = 0.5


class ExecutionPhase(str, enum.Enum):
    PREPARING = "Preparing"
    BUILDING = "Building"
    PUSHING = "Pushing"
    SUBMITTING = "Submitting"
    PENDING = "Pending"
    RUNNING = "Running"
    COLLECTING = "Collecting"
    CLEANING_UP = "CleaningUp"
    DONE = "Done"


PHASE_ORDER = tuple(ExecutionPhase)


class Outcome(str, enum.Enum):
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    TIMED_OUT = "TimedOut"
    ABORTED = "Aborted"
    INFRA_ERROR = "InfraError"


@dataclass(frozen=True)
class ExecutionOptions:
    base_image: str
    registry: str
    gpu_count: int = 1
    poll_interval: float = DEFAULT_POLL_INTERVAL
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES
    retry_backoff: float = DEFAULT_BACKOFF
    package_map: Mapping[str, str] | None = None

    def __post_init__(self):
        if self.gpu_count < 0:
            raise ValueError("gpu_count must be >= 0")
        if self.poll_interval <= 0 or self.timeout <= 0:
            raise ValueError("poll_interval and timeout must be positive")


@dataclass
class ExecutionResult:
    phase: Outcome
    exit_code: int | None = None
    stdout: str = ""
    stderr: str = ""
    timeline: list[tuple[ExecutionPhase, float]] = field(default_factory=list)
    job_name: str = ""
    message: str = ""
    failed_phase: ExecutionPhase | None = None
    image_ref: str = ""
    polls: int = 0

    @property
    def ok(self) -> bool:
        return self.phase is Outcome.SUCCEEDED

    def states(self) -> list[ExecutionPhase]:
        return [s for s, _ in self.timeline]

    def to_dict(self) -> dict:
        return {
            "phase": self.phase.value,
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "message": self.message,
            "failed_phase": self.failed_phase.value if self.failed_phase else None,
            "job_name": self.job_name,
            "image_ref": self.image_ref,
            "polls": self.polls,
            "timeline": [[s.value, t] for s, t in self.timeline],
        }


class _Aborted(Exception):
    pass


class _TimedOut(Exception):
    pass


class RunHandle:
    """Tracks one in-flight run; ``abort`` may be called from any thread."""

    def __init__(self, cell: CellSource):
        self.cell = cell
        self.run_id = uuid.uuid4().hex
        self._abort = threading.Event()
        self._cond = threading.Condition()
        self._phase: ExecutionPhase | None = None
        self._result: ExecutionResult | None = None

    @property
    def phase(self) -> ExecutionPhase | None:
        return self._phase

    @property
    def abort_requested(self) -> bool:
        return self._abort.is_set()

    def abort(self) -> None:
        if not self.done():
            self._abort.set()

    def done(self) -> bool:
        return self._result is not None

    def wait_for_phase(self, phase: ExecutionPhase, timeout: float | None = None) -> bool:
        target = PHASE_ORDER.index(phase)
        with self._cond:
            return self._cond.wait_for(
                lambda: self._phase is not None and PHASE_ORDER.index(self._phase) >= target,
                timeout,
            )

    def result(self, timeout: float | None = None) -> ExecutionResult:
        with self._cond:
            if not self._cond.wait_for(lambda: self._result is not None, timeout):
                raise TimeoutError("run still in progress")
            return self._result

    def _set_phase(self, phase: ExecutionPhase) -> None:
        with self._cond:
            self._phase = phase
            self._cond.notify_all()

    def _finish(self, result: ExecutionResult) -> None:
        with self._cond:
            self._result = result
            self._cond.notify_all()


class _Run:
    def __init__(self, orch: "Orchestrator", handle: RunHandle, cfg: ClusterConfig, opts: ExecutionOptions):
        self.orch = orch
        self.handle = handle
        self.cfg = cfg
        self.opts = opts
        self.result = ExecutionResult(phase=Outcome.INFRA_ERROR)
        self.state: ExecutionPhase | None = None
        self.created: list[tuple[str, str]] = []
        self.client: ClusterClient | None = None

    def enter(self, phase: ExecutionPhase) -> None:
        if phase not in (ExecutionPhase.CLEANING_UP, ExecutionPhase.DONE) and self.handle.abort_requested:
            raise _Aborted()
        if self.state is not None:
            assert PHASE_ORDER.index(phase) > PHASE_ORDER.index(self.state), (self.state, phase)
        self.state = phase
        self.result.timeline.append((phase, time.time()))
        self.handle._set_phase(phase)
        log.debug("run %s -> %s", self.handle.run_id[:8], phase.value)

    def sleep(self, seconds: float, interruptible: bool = True) -> None:
        if interruptible:
            if self.handle._abort.wait(seconds):
                raise _Aborted()
        else:
            time.sleep(seconds)

    def call(self, fn: Callable, *args, interruptible: bool = True, creating: bool = False):
        """Invoke a client method, retrying transient API failures with backoff."""
        attempts = self.opts.retries + 1
        for attempt in range(attempts):
            try:
                return fn(*args)
            except ApiUnavailable:
                if attempt == attempts - 1:
                    raise
                delay = self.opts.retry_backoff * 2**attempt
                log.info("%s unavailable, retry %d in %.3fs", fn.__name__, attempt + 1, delay)
                self.sleep(delay, interruptible)
            except Conflict:
                # A 409 after a lost response means our earlier attempt landed.
                if creating and attempt > 0:
                    return None
                raise

    def run(self) -> ExecutionResult:
        res = self.result
        try:
            self._execute()
        except _Aborted:
            res.phase = Outcome.ABORTED
            res.message = f"aborted during {self.state.value if self.state else 'startup'}"
        except _TimedOut:
            res.phase = Outcome.TIMED_OUT
            res.message = f"timed out after {self.opts.timeout:g}s waiting in {self.state.value}"
        except (ApiError, BuildFailed, PushFailed, InvalidReference, ValueError) as exc:
            self._infra_error(exc)
        except Exception as exc:  # noqa: BLE001
            log.exception("unexpected failure in run %s", self.handle.run_id)
            self._infra_error(exc)
        self._cleanup()
        self.enter(ExecutionPhase.DONE)
        return res

    def _infra_error(self, exc: Exception) -> None:
        self.result.phase = Outcome.INFRA_ERROR
        self.result.failed_phase = self.state
        where = self.state.value if self.state else "startup"
        self.result.message = f"{type(exc).__name__} during {where}: {exc}"

    def _execute(self) -> None:
        orch, opts, res = self.orch, self.opts, self.result
        self.enter(ExecutionPhase.PREPARING)
        manifest = analyze(self.handle.cell, opts.package_map)
        spec = build_spec(manifest, opts.base_image, opts.registry)
        res.image_ref = spec.image_ref
        job, cm = make_manifests(
            self.handle.cell.text, spec.image_ref, opts.gpu_count, suffix=orch.next_suffix()
        )
        res.job_name = job.name

        builder = orch.builder
        with builder.exclusive(spec):
            if builder.needs_rebuild(spec):
                self.enter(ExecutionPhase.BUILDING)
                builder.build(spec)
                self.enter(ExecutionPhase.PUSHING)
                builder.push(spec)

        self.enter(ExecutionPhase.SUBMITTING)
        self.client = client = orch.client_factory(self.cfg)
        self.created.append(("configmap", cm.name))
        self.call(client.create_configmap, cm.to_dict(), creating=True)
        if self.handle.abort_requested:
            raise _Aborted()
        self.created.append(("job", job.name))
        self.call(client.create_job, job.to_dict(), creating=True)

        self.enter(ExecutionPhase.PENDING)
        deadline = time.monotonic() + opts.timeout
        while True:
            status = self.call(client.get_job_status, job.name)
            res.polls += 1
            if status.phase is not JobPhase.PENDING and self.state is ExecutionPhase.PENDING:
                self.enter(ExecutionPhase.RUNNING)
            if status.phase.terminal:
                break
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _TimedOut()
            self.sleep(min(opts.poll_interval, remaining))
            if time.monotonic() >= deadline:
                raise _TimedOut()

        self.enter(ExecutionPhase.COLLECTING)
        res.exit_code = status.exit_code
        logs = self.call(client.get_pod_logs, status.pod_name) if status.pod_name else ""
        if status.exit_code == 0:
            res.phase, res.stdout = Outcome.SUCCEEDED, logs
        else:
            res.phase, res.stderr = Outcome.FAILED, logs
            res.message = f"container exited with code {status.exit_code}"
            if status.reason:
                res.message += f" ({status.reason})"

    def _cleanup(self) -> None:
        self.enter(ExecutionPhase.CLEANING_UP)
        if not self.created:
            return
        deleters = {"job": self.client.delete_job, "configmap": self.client.delete_configmap}
        errors = []
        for kind, name in sorted(self.created, key=lambda c: c[0] != "job"):
            try:
                self.call(deleters[kind], name, interruptible=False)
            except NotFound:
                pass
            except ApiError as exc:
                errors.append(f"{kind}/{name}: {exc}")
        if errors:
            res = self.result
            log.error("cleanup left resources behind: %s", "; ".join(errors))
            note = "cleanup failed: " + "; ".join(errors)
            if res.phase is Outcome.INFRA_ERROR and res.failed_phase is not None:
                # keep the original cause, it is the more useful one
                res.message = f"{res.message}; {note}"
                return
            res.phase = Outcome.INFRA_ERROR
            res.failed_phase = ExecutionPhase.CLEANING_UP
            res.message = note


class Orchestrator:
    """Runs cells as Jobs; one instance can drive many concurrent runs."""

    def __init__(
        self,
        builder: ImageBuilder,
        *,
        rng: random.Random | None = None,
        client_factory: Callable[[ClusterConfig], ClusterClient] = ClusterClient,
    ):
        self.builder = builder
        self.client_factory = client_factory
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()

    def next_suffix(self) -> str:
        with self._rng_lock:
            return new_suffix(self._rng)

    def _drive(self, handle: RunHandle, cfg: ClusterConfig, opts: ExecutionOptions) -> ExecutionResult:
        result = _Run(self, handle, cfg, opts).run()
        handle._finish(result)
        return result

    def submit(self, cell: CellSource, cfg: ClusterConfig, opts: ExecutionOptions) -> RunHandle:
        """Start a run on a background thread and return its handle."""
        handle = RunHandle(cell)
        threading.Thread(
            target=self._drive, args=(handle, cfg, opts), name=f"q8s-run-{handle.run_id[:8]}", daemon=True
        ).start()
        return handle

    def execute_cell(
        self,
        cell: CellSource,
        cfg: ClusterConfig,
        opts: ExecutionOptions,
        handle: RunHandle | None = None,
    ) -> ExecutionResult:
        return self._drive(handle or RunHandle(cell), cfg, opts)

    @staticmethod
    def abort(handle: RunHandle) -> None:
        handle.abort()
