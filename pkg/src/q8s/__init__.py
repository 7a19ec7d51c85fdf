"""Run notebook cells as Kubernetes Jobs on GPU-capable clusters."""

__version__ = "0.1.0"
