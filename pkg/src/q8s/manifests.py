"""Job and ConfigMap manifests in the fixed quantum-job shape."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .cluster import is_dns_label

JOB_PREFIX = "quantum-job"
CONFIGMAP_PREFIX = "task-files"
POD_NAME = "quantum-pod"
CONTAINER_NAME = "quantum-task"
VOLUME_NAME = "config-volume"
MOUNT_PATH = "/app"
SCRIPT_KEY = "main.py"
COMMAND = ("python", f"{MOUNT_PATH}/{SCRIPT_KEY}")
GPU_RESOURCE = "nvidia.com/gpu"


def new_suffix(rng: random.Random | None = None) -> str:
    return f"{(rng or random).getrandbits(32):08x}"


@dataclass(frozen=True)
class JobManifest:
    name: str
    image: str
    configmap_name: str
    command: tuple[str, ...] = COMMAND
    gpu_count: int = 1
    mount_path: str = MOUNT_PATH
    restart_policy: str = "Never"

    def __post_init__(self):
        if not is_dns_label(self.name) or not is_dns_label(self.configmap_name):
            raise ValueError("job and configmap names must be DNS labels")
        if self.gpu_count < 0:
            raise ValueError("gpu_count must be >= 0")
        if self.restart_policy != "Never":
            raise ValueError("restart_policy must be Never")

    def to_dict(self) -> dict:
        container = {
            "name": CONTAINER_NAME,
            "image": self.image,
            "command": list(self.command),
        }
        # Requesting zero of an extended resource is rejected by schedulers.
        if self.gpu_count > 0:
            container["resources"] = {"requests": {GPU_RESOURCE: str(self.gpu_count)}}
        container["volumeMounts"] = [{"name": VOLUME_NAME, "mountPath": self.mount_path}]
        return {
            "apiVersion": "batch/v1",
            "kind": "Job",
            "metadata": {"name": self.name},
            "spec": {
                "template": {
                    "metadata": {"name": POD_NAME},
                    "spec": {
                        "containers": [container],
                        "volumes": [
                            {"name": VOLUME_NAME, "configMap": {"name": self.configmap_name}}
                        ],
                        "restartPolicy": self.restart_policy,
                    },
                }
            },
        }


@dataclass(frozen=True)
class ConfigMapManifest:
    name: str
    data: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not is_dns_label(self.name):
            raise ValueError("configmap name must be a DNS label")
        if list(self.data) != [SCRIPT_KEY]:
            raise ValueError(f"configmap data must hold exactly {SCRIPT_KEY!r}")

    def to_dict(self) -> dict:
        return {
            "apiVersion": "v1",
            "kind": "ConfigMap",
            "metadata": {"name": self.name},
            "data": dict(self.data),
        }


def make_manifests(
    code: str,
    image_ref: str,
    gpu_count: int = 1,
    *,
    suffix: str | None = None,
    rng: random.Random | None = None,
) -> tuple[JobManifest, ConfigMapManifest]:
    suffix = suffix or new_suffix(rng)
    cm = ConfigMapManifest(f"{CONFIGMAP_PREFIX}-{suffix}", {SCRIPT_KEY: code})
    job = JobManifest(
        name=f"{JOB_PREFIX}-{suffix}",
        image=image_ref,
        configmap_name=cm.name,
        gpu_count=gpu_count,
    )
    return job, cm
