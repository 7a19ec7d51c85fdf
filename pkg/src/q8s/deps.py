"""Static detection of the packages a cell needs installed in its image.

Only import statements are inspected; the cell is never executed locally.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

STDLIB_VERSION = "3.10"

_PACKAGE_NAME = re.compile(r"^[A-Za-z0-9._-]+$")
_FROM_LINE = re.compile(r"^from\s+(\.*)([A-Za-z_][\w.]*)?\s+import\b")
_DEF_LINE = re.compile(r"^(?:async\s+def|def|class)\s+([A-Za-z_]\w*)")

# The cell is mounted as /app/main.py, so `import main` refers to itself.
_SELF_MODULES = frozenset({"main", "__main__"})


@dataclass(frozen=True)
class CellSource:
    text: str
    cell_id: str = "cell"

    def __post_init__(self):
        if not self.cell_id:
            raise ValueError("cell_id must be non-empty")


@dataclass(frozen=True)
class DependencyManifest:
    packages: tuple[str, ...] = ()

    def __post_init__(self):
        pkgs = tuple(self.packages)
        if list(pkgs) != sorted(set(pkgs)):
            raise ValueError("packages must be sorted and unique")
        for p in pkgs:
            if not _PACKAGE_NAME.match(p):
                raise ValueError(f"invalid package name: {p!r}")
        object.__setattr__(self, "packages", pkgs)

    def __iter__(self):
        return iter(self.packages)

    def __len__(self):
        return len(self.packages)


def parse_mapping(text: str) -> dict[str, str]:
    """Parse ``module=package`` lines; blank lines and ``#`` comments are ignored."""
    table = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        module, sep, package = (s.strip() for s in line.partition("="))
        if not sep or not module.isidentifier() or not _PACKAGE_NAME.match(package):
            raise ValueError(f"line {lineno}: expected module=package, got {raw!r}")
        table[module] = package
    return table


@lru_cache(maxsize=None)
def stdlib_modules() -> frozenset[str]:
    text = resources.files("q8s.data").joinpath("stdlib_py310.txt").read_text("utf-8")
    return frozenset(
        line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


@lru_cache(maxsize=None)
def _default_mapping() -> Mapping[str, str]:
    text = resources.files("q8s.data").joinpath("package_map.txt").read_text("utf-8")
    return parse_mapping(text)


def default_mapping() -> dict[str, str]:
    return dict(_default_mapping())


def load_mapping(path: str | Path) -> dict[str, str]:
    """Shipped table overlaid with the entries from a user override file."""
    table = default_mapping()
    table.update(parse_mapping(Path(path).read_text("utf-8")))
    return table


def map_module_to_package(module: str, mapping: Mapping[str, str] | None = None) -> str:
    table = _default_mapping() if mapping is None else mapping
    return table.get(module, module)


def _scan_tree(tree: ast.AST) -> tuple[set[str], set[str]]:
    imported, defined = set(), set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            imported.update(alias.name.split(".")[0] for alias in node.names)
        elif isinstance(node, ast.ImportFrom):
            if node.level == 0 and node.module:
                imported.add(node.module.split(".")[0])
    if isinstance(tree, ast.Module):
        for node in tree.body:
            if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
                defined.add(node.name)
    return imported, defined


def _scan_lines(text: str) -> tuple[set[str], set[str]]:
    # Fallback for cells that do not parse as a whole.
    imported, defined = set(), set()
    for line in text.splitlines():
        m = _DEF_LINE.match(line)
        if m:
            defined.add(m.group(1))
        stripped = line.strip()
        if not stripped.startswith(("import", "from")):
            continue
        try:
            found, _ = _scan_tree(ast.parse(stripped))
        except (SyntaxError, ValueError):
            m = _FROM_LINE.match(stripped)
            found = {m.group(2).split(".")[0]} if m and not m.group(1) and m.group(2) else set()
        imported |= found
    return imported, defined


def root_modules(text: str) -> set[str]:
    """Root module names imported by ``text``, minus relative and self-defined ones."""
    try:
        imported, defined = _scan_tree(ast.parse(text))
    except (SyntaxError, ValueError):
        imported, defined = _scan_lines(text)
    return imported - defined - _SELF_MODULES


def analyze(cell: CellSource | str, mapping: Mapping[str, str] | None = None) -> DependencyManifest:
    text = cell.text if isinstance(cell, CellSource) else cell
    stdlib = stdlib_modules()
    packages = {
        map_module_to_package(m, mapping) for m in root_modules(text) if m not in stdlib
    }
    packages -= stdlib
    return DependencyManifest(tuple(sorted(packages)))

