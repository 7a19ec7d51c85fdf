"""``q8s`` command line: run files remotely, inspect manifests, manage the kernel."""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .cluster import ClusterConfig, KubeconfigError, load_kubeconfig
from .deps import CellSource, analyze, load_mapping
from .image import (
    BuildDriver,
    ImageBuilder,
    ImageCache,
    NullDriver,
    SubprocessDriver,
    build_spec,
    validate_image_ref,
    validate_registry,
)
from .kernel import DISPLAY_NAME, Engine, KernelServer, kernelspec, load_connection_file
from .manifests import make_manifests, new_suffix
from .orchestrator import DEFAULT_POLL_INTERVAL, DEFAULT_TIMEOUT, ExecutionOptions, Orchestrator, Outcome

log = logging.getLogger("q8s")

DEFAULT_BASE_IMAGE = "cuda-base:12"
DEFAULT_REGISTRY = "registry.com/user"
KERNEL_NAME = "q8s"

EX_OK = 0
EX_USAGE = 64
EX_SOFTWARE = 70
EX_TIMEOUT = 124
EX_INTERRUPTED = 130

OUTCOME_EXIT = {
    Outcome.INFRA_ERROR: EX_SOFTWARE,
    Outcome.TIMED_OUT: EX_TIMEOUT,
    Outcome.ABORTED: EX_INTERRUPTED,
}


class UsageError(Exception):
    pass


class WriteFailed(OSError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class CliConfig:
    kubeconfig_path: str | None = None
    base_image: str = DEFAULT_BASE_IMAGE
    registry: str = DEFAULT_REGISTRY
    namespace: str | None = None
    gpu_count: int = 1
    poll_interval: float = DEFAULT_POLL_INTERVAL
    timeout: float = DEFAULT_TIMEOUT
    output_format: str = "text"
    seed: int | None = None
    package_map: str | None = None
    builder: str = "docker"
    image_cache: str | None = None

    @classmethod
    def resolve(cls, args: argparse.Namespace, env: Mapping[str, str]) -> "CliConfig":
        """Flags win over environment variables, which win over defaults."""

        def pick(flag, var, default):
            if flag is not None:
                return flag
            if var and env.get(var):
                return env[var]
            return default

        cfg = cls(
            kubeconfig_path=pick(args.kubeconfig, "KUBECONFIG", None),
            base_image=pick(args.base_image, "Q8S_BASE_IMAGE", DEFAULT_BASE_IMAGE),
            registry=pick(args.registry, "Q8S_REGISTRY", DEFAULT_REGISTRY),
            namespace=pick(args.namespace, "Q8S_NAMESPACE", None),
            gpu_count=pick(args.gpu, None, 1),
            poll_interval=pick(args.poll_interval, None, DEFAULT_POLL_INTERVAL),
            timeout=pick(args.timeout, None, DEFAULT_TIMEOUT),
            output_format=pick(args.output, None, "text"),
            seed=args.seed,
            package_map=env.get("Q8S_PACKAGE_MAP") or None,
            builder=env.get("Q8S_BUILDER") or "docker",
            image_cache=env.get("Q8S_IMAGE_CACHE") or None,
        )
        if cfg.gpu_count < 0:
            raise UsageError("--gpu must be >= 0")
        if cfg.poll_interval <= 0 or cfg.timeout <= 0:
            raise UsageError("--poll-interval and --timeout must be positive")
        return cfg

    def options(self) -> ExecutionOptions:
        try:
            validate_image_ref(self.base_image)
            validate_registry(self.registry)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        mapping = None
        if self.package_map:
            try:
                mapping = load_mapping(self.package_map)
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read package map {self.package_map}: {exc}") from exc
        return ExecutionOptions(
            base_image=self.base_image,
            registry=self.registry,
            gpu_count=self.gpu_count,
            poll_interval=self.poll_interval,
            timeout=self.timeout,
            package_map=mapping,
        )

    def cluster(self) -> ClusterConfig:
        if not self.kubeconfig_path:
            raise UsageError("no kubeconfig: pass --kubeconfig or set KUBECONFIG")
        try:
            return load_kubeconfig(self.kubeconfig_path, namespace=self.namespace)
        except KubeconfigError as exc:
            raise UsageError(str(exc)) from exc

    def driver(self) -> BuildDriver:
        if self.builder == "none":
            return NullDriver()
        return SubprocessDriver(tool=self.builder)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kubeconfig", help="cluster config file (default: $KUBECONFIG)")
    p.add_argument("--namespace", help="target namespace (default: $Q8S_NAMESPACE, then the context's)")
    p.add_argument("--base-image", help="CUDA-capable base image (default: $Q8S_BASE_IMAGE)")
    p.add_argument("--registry", help="registry prefix images are pushed to (default: $Q8S_REGISTRY)")
    p.add_argument("--gpu", type=int, help="GPUs to request; 0 omits the request (default: 1)")
    p.add_argument("--poll-interval", type=float, help="seconds between status polls (default: 2)")
    p.add_argument("--timeout", type=float, help="seconds allowed in Pending+Running (default: 3600)")
    p.add_argument("--output", choices=("text", "json"), help="output format (default: text)")
    p.add_argument("--seed", type=int, help="seed for job name suffixes")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="q8s", description="Run Python code as GPU Jobs on a Kubernetes cluster.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="execute a file as one remote job")
    p.add_argument("file")
    _common(p)

    p = sub.add_parser("dry-run", help="print the manifests and image spec without contacting anything")
    p.add_argument("file")
    _common(p)

    p = sub.add_parser("check-config", help="validate a kubeconfig and show the resolved context")
    _common(p)

    p = sub.add_parser("install-kernelspec", help=f"register the {DISPLAY_NAME!r} notebook kernel")
    p.add_argument("--kernelspec-dir", help="directory holding kernel specs (default: user data dir)")
    p.add_argument("--name", default=KERNEL_NAME)
    _common(p)

    p = sub.add_parser("kernel", help="serve the notebook kernel protocol (launched by the frontend)")
    p.add_argument("connection_file")
    _common(p)
    return parser


def _read_source(path: str) -> str:
    try:
        return Path(path).read_text("utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise UsageError(f"{path} is not valid UTF-8") from exc


def cmd_run(cfg: CliConfig, path: str, driver: BuildDriver | None = None, out=None, err=None) -> int:
    out, err = out or sys.stdout, err or sys.stderr
    text = _read_source(path)
    cluster = cfg.cluster()
    opts = cfg.options()
    builder = ImageBuilder(driver or cfg.driver(), ImageCache(cfg.image_cache))
    orch = Orchestrator(builder, rng=random.Random(cfg.seed))
    handle = orch.submit(CellSource(text, Path(path).name or "cell"), cluster, opts)
    while True:
        try:
            result = handle.result(timeout=0.2)
            break
        except TimeoutError:
            continue
        except KeyboardInterrupt:
            print("q8s: interrupted, cleaning up", file=err)
            handle.abort()

    if cfg.output_format == "json":
        out.write(json.dumps(result.to_dict(), indent=2) + "\n")
    else:
        out.write(result.stdout)
        err.write(result.stderr)
        if not result.ok and result.message:
            print(f"q8s: {result.phase.value}: {result.message}", file=err)
    if result.phase in (Outcome.SUCCEEDED, Outcome.FAILED):
        if not result.exit_code:
            return EX_OK
        return (result.exit_code & 0xFF) or 1
    return OUTCOME_EXIT[result.phase]


def dry_run_document(cfg: CliConfig, text: str) -> dict:
    opts = cfg.options()
    spec = build_spec(analyze(text, opts.package_map), opts.base_image, opts.registry)
    suffix = new_suffix(random.Random(cfg.seed) if cfg.seed is not None else None)
    job, cm = make_manifests(text, spec.image_ref, opts.gpu_count, suffix=suffix)
    return {"image": spec.to_dict(), "job": job.to_dict(), "configmap": cm.to_dict()}


def cmd_dry_run(cfg: CliConfig, path: str, out=None) -> int:
    doc = dry_run_document(cfg, _read_source(path))
    (out or sys.stdout).write(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    return EX_OK


def cmd_check_config(cfg: CliConfig, out=None) -> int:
    out = out or sys.stdout
    info = cfg.cluster().describe()
    if cfg.output_format == "json":
        out.write(json.dumps(info, indent=2) + "\n")
    else:
        for k, v in info.items():
            out.write(f"{k}: {v}\n")
    return EX_OK


def default_kernelspec_root() -> Path:
    if os.environ.get("JUPYTER_DATA_DIR"):
        return Path(os.environ["JUPYTER_DATA_DIR"]) / "kernels"
    if sys.platform == "darwin":
        return Path.home() / "Library" / "Jupyter" / "kernels"
    if os.name == "nt":
        return Path(os.environ.get("APPDATA", Path.home())) / "jupyter" / "kernels"
    data = os.environ.get("XDG_DATA_HOME") or Path.home() / ".local" / "share"
    return Path(data) / "jupyter" / "kernels"


def install_kernelspec(cfg: CliConfig, root: str | Path | None = None, name: str = KERNEL_NAME) -> Path:
    """Write ``<root>/<name>/kernel.json`` launching this package's kernel mode."""
    target = Path(root or default_kernelspec_root()) / name
    spec = kernelspec([sys.executable, "-m", "q8s", "kernel", "{connection_file}"])
    env = {}
    if cfg.kubeconfig_path:
        env["KUBECONFIG"] = str(Path(cfg.kubeconfig_path).resolve())
    for var, value, default in (
        ("Q8S_BASE_IMAGE", cfg.base_image, DEFAULT_BASE_IMAGE),
        ("Q8S_REGISTRY", cfg.registry, DEFAULT_REGISTRY),
        ("Q8S_NAMESPACE", cfg.namespace, None),
    ):
        if value and value != default:
            env[var] = value
    if env:
        spec["env"] = env
    path = target / "kernel.json"
    try:
        target.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(spec, indent=2) + "\n")
    except OSError as exc:
        raise WriteFailed(f"cannot write kernel spec to {path}: {exc.strerror}") from exc
    return path


def make_engine(cfg: CliConfig, driver: BuildDriver | None = None) -> Engine:
    try:
        cluster, error = cfg.cluster(), ""
    except UsageError as exc:
        cluster, error = None, str(exc)
        log.error("kernel starting without a cluster: %s", error)
    builder = ImageBuilder(driver or cfg.driver(), ImageCache(cfg.image_cache))
    orch = Orchestrator(builder, rng=random.Random(cfg.seed))
    return Engine(orch, cluster, cfg.options(), error)


def cmd_kernel(cfg: CliConfig, connection_file: str, driver: BuildDriver | None = None) -> int:
    try:
        conn = load_connection_file(connection_file)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad connection file {connection_file}: {exc}") from exc
    KernelServer(conn, make_engine(cfg, driver)).serve_forever()
    return EX_OK


def main(argv: Sequence[str] | None = None, *, driver: BuildDriver | None = None, env=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    env = os.environ if env is None else env
    try:
        cfg = CliConfig.resolve(args, env)
        if args.command == "run":
            return cmd_run(cfg, args.file, driver)
        if args.command == "dry-run":
            return cmd_dry_run(cfg, args.file)
        if args.command == "check-config":
            return cmd_check_config(cfg)
        if args.command == "install-kernelspec":
            path = install_kernelspec(cfg, args.kernelspec_dir, args.name)
            print(f"installed {DISPLAY_NAME!r} kernel spec at {path}")
            return EX_OK
        if args.command == "kernel":
            return cmd_kernel(cfg, args.connection_file, driver)
    except UsageError as exc:
        print(f"q8s: {exc}", file=sys.stderr)
        return EX_USAGE
    except WriteFailed as exc:
        print(f"q8s: {exc}", file=sys.stderr)
        return 73  # EX_CANTCREAT
    except ValueError as exc:
        print(f"q8s: {exc}", file=sys.stderr)
        return EX_USAGE
    parser.error(f"unknown command {args.command}")
    return EX_USAGE

