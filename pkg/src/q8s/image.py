"""Container build context synthesis, content digests and the rebuild cache."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import subprocess
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Protocol

from .deps import DependencyManifest

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "q8s-dockerfile/1"
REPOSITORY = "job-dependencies"
TAG_LENGTH = 12

_FROM = "FROM {base}\n"
_INSTALL = (
    "COPY requirements.txt /tmp/requirements.txt\n"
    "RUN pip install --no-cache-dir -r /tmp/requirements.txt\n"
)

# Grammar follows the distribution reference format used by registries.
_COMPONENT = r"[a-z0-9]+(?:(?:[._]|__|-+)[a-z0-9]+)*"
_DOMAIN = r"(?:[a-zA-Z0-9](?:[a-zA-Z0-9-]*[a-zA-Z0-9])?)(?:\.[a-zA-Z0-9](?:[a-zA-Z0-9-]*[a-zA-Z0-9])?)*(?::[0-9]+)?"
_PATH = rf"(?:{_DOMAIN}/)?{_COMPONENT}(?:/{_COMPONENT})*"
_TAG = r"[\w][\w.-]{0,127}"
_IMAGE_RE = re.compile(rf"^{_PATH}(?::{_TAG})?(?:@sha256:[a-f0-9]{{64}})?$")
_REGISTRY_RE = re.compile(rf"^{_DOMAIN}(?:/{_COMPONENT})*$")


class InvalidReference(ValueError):
    pass


class BuildFailed(RuntimeError):
    def __init__(self, message: str, build_log: str = ""):
        super().__init__(message)
        self.build_log = build_log


class PushFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class ImageSpec:
    base_image: str
    dockerfile_text: str
    requirements_text: str
    digest: str
    image_ref: str

    @property
    def tag(self) -> str:
        return self.image_ref.rsplit(":", 1)[1]

    def context_files(self) -> dict[str, str]:
        files = {"Dockerfile": self.dockerfile_text}
        if self.requirements_text:
            files["requirements.txt"] = self.requirements_text
        return files

    def to_dict(self) -> dict:
        return {
            "base_image": self.base_image,
            "dockerfile": self.dockerfile_text,
            "requirements": self.requirements_text,
            "digest": self.digest,
            "image_ref": self.image_ref,
        }


def validate_image_ref(ref: str) -> str:
    if not ref or not _IMAGE_RE.match(ref):
        raise InvalidReference(f"not a valid image reference: {ref!r}")
    return ref


def validate_registry(registry: str) -> str:
    if not registry or not _REGISTRY_RE.match(registry):
        raise InvalidReference(f"not a valid registry prefix: {registry!r}")
    return registry


def render_dockerfile(base: str, has_requirements: bool) -> str:
    return _FROM.format(base=base) + (_INSTALL if has_requirements else "")


def compute_digest(base: str, requirements: str, template_version: str = TEMPLATE_VERSION) -> str:
    payload = json.dumps([template_version, base, requirements], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_spec(manifest: DependencyManifest | Iterable[str], base: str, registry: str) -> ImageSpec:
    validate_image_ref(base)
    validate_registry(registry.rstrip("/"))
    packages = list(manifest)
    requirements = "".join(p + "\n" for p in packages)
    digest = compute_digest(base, requirements)
    return ImageSpec(
        base_image=base,
        dockerfile_text=render_dockerfile(base, bool(packages)),
        requirements_text=requirements,
        digest=digest,
        image_ref=f"{registry.rstrip('/')}/{REPOSITORY}:{digest[:TAG_LENGTH]}",
    )


def needs_rebuild(spec: ImageSpec, cache: Collection[str]) -> bool:
    return spec.digest not in cache


class ImageCache:
    """Digests of images already built and pushed.

    In-memory by default; when ``path`` is given, the set is loaded from and
    appended to a text file with one digest per line.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._digests: set[str] = set()
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._digests.update(
                line.strip() for line in self.path.read_text().splitlines() if line.strip()
            )

    def __contains__(self, digest: object) -> bool:
        with self._lock:
            return digest in self._digests

    def __len__(self) -> int:
        with self._lock:
            return len(self._digests)

    def __iter__(self):
        with self._lock:
            return iter(sorted(self._digests))

    def add(self, digest: str) -> None:
        with self._lock:
            if digest in self._digests:
                return
            self._digests.add(digest)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    fh.write(digest + "\n")


class BuildDriver(Protocol):
    def build(self, image_ref: str, files: dict[str, str]) -> str:
        """Build ``files`` as a context tagged ``image_ref``; return the build log."""

    def push(self, image_ref: str) -> None: ...


@dataclass
class RecordingDriver:
    """Build driver that records calls instead of talking to a daemon.

    ``fail_builds``/``fail_pushes`` make the next N calls of that kind fail.
    """

    fail_builds: int = 0
    fail_pushes: int = 0
    builds: list[tuple[str, dict[str, str]]] = field(default_factory=list)
    pushes: list[str] = field(default_factory=list)
    delay: float = 0.0

    def __post_init__(self):
        self._lock = threading.Lock()

    def build(self, image_ref, files):
        if self.delay:
            threading.Event().wait(self.delay)
        with self._lock:
            if self.fail_builds > 0:
                self.fail_builds -= 1
                raise BuildFailed(f"scripted build failure for {image_ref}", "step 1/3: error")
            self.builds.append((image_ref, dict(files)))
        return f"built {image_ref}"

    def push(self, image_ref):
        with self._lock:
            if self.fail_pushes > 0:
                self.fail_pushes -= 1
                raise PushFailed(f"scripted push failure for {image_ref}")
            self.pushes.append(image_ref)


class NullDriver:
    """Skips building; for clusters where the image is published out of band."""

    def build(self, image_ref, files):
        return ""

    def push(self, image_ref):
        pass


@dataclass
class SubprocessDriver:
    """Shells out to a docker-compatible CLI (docker, podman, nerdctl)."""

    tool: str = "docker"
    timeout: float = 3600.0

    def _run(self, args: list[str]) -> subprocess.CompletedProcess:
        return subprocess.run(
            [self.tool, *args],
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )

    def build(self, image_ref, files):
        with tempfile.TemporaryDirectory(prefix="q8s-build-") as ctx:
            for name, text in files.items():
                Path(ctx, name).write_text(text)
            try:
                proc = self._run(["build", "-t", image_ref, ctx])
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise BuildFailed(f"{self.tool} build could not run: {exc}") from exc
        output = proc.stdout + proc.stderr
        if proc.returncode != 0:
            raise BuildFailed(f"{self.tool} build exited {proc.returncode}", output)
        return output

    def push(self, image_ref):
        try:
            proc = self._run(["push", image_ref])
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise PushFailed(f"{self.tool} push could not run: {exc}") from exc
        if proc.returncode != 0:
            raise PushFailed(f"{self.tool} push exited {proc.returncode}: {proc.stderr.strip()}")


class ImageBuilder:
    """Builds and pushes images at most once per digest.

    Concurrent requests for the same digest coalesce into one build; distinct
    digests build in parallel.
    """

    def __init__(self, driver: BuildDriver, cache: ImageCache | None = None):
        self.driver = driver
        self.cache = cache if cache is not None else ImageCache()
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, digest: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(digest, threading.Lock())

    @contextmanager
    def exclusive(self, spec: ImageSpec):
        with self._lock_for(spec.digest):
            yield

    def needs_rebuild(self, spec: ImageSpec) -> bool:
        return needs_rebuild(spec, self.cache)

    def build(self, spec: ImageSpec) -> str:
        build_log = self.driver.build(spec.image_ref, spec.context_files())
        log.debug("build log for %s:\n%s", spec.image_ref, build_log)
        return build_log

    def push(self, spec: ImageSpec) -> str:
        self.driver.push(spec.image_ref)
        self.cache.add(spec.digest)
        return spec.image_ref

    def build_and_push(self, spec: ImageSpec) -> str:
        with self.exclusive(spec):
            if spec.digest in self.cache:
                return spec.image_ref
            self.build(spec)
            return self.push(spec)


def build_and_push(spec: ImageSpec, driver: BuildDriver, cache: ImageCache) -> str:
    return ImageBuilder(driver, cache).build_and_push(spec)
