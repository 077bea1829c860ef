"""Project root discovery and the layout of the ``.flor/`` metadata folder."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ProjectNotFound

META_DIR = ".flor"
ENV_PROJECT = "FLOR_PROJECT"


@dataclass(frozen=True)
class Project:
    root: Path

    @property
    def projid(self) -> str:
        return self.root.name

    @property
    def meta(self) -> Path:
        return self.root / META_DIR

    @property
    def db_path(self) -> Path:
        return self.meta / "main.db"

    @property
    def obj_dir(self) -> Path:
        return self.meta / "obj"

    @property
    def logs_dir(self) -> Path:
        return self.meta / "logs"

    @property
    def lock_path(self) -> Path:
        return self.meta / "vcs.lock"

    def ensure(self) -> Project:
        for d in (self.meta, self.obj_dir, self.logs_dir):
            d.mkdir(parents=True, exist_ok=True)
        ignore = self.meta / ".gitignore"
        if not ignore.exists():
            # keeps the metadata out of the user's own commits; shadow commits add logs explicitly
            ignore.write_text("*\n")
        return self


def find_root(start: Path | str | None = None) -> Path | None:
    """Walk up from ``start`` to the directory holding ``.flor/``."""
    env = os.environ.get(ENV_PROJECT)
    if env:
        return Path(env).resolve()
    here = Path(start or os.getcwd()).resolve()
    for d in (here, *here.parents):
        if (d / META_DIR).is_dir():
            return d
    return None


def discover(start: Path | str | None = None) -> Project:
    root = find_root(start)
    if root is None:
        raise ProjectNotFound(
            f"no {META_DIR}/ folder found above {Path(start or os.getcwd()).resolve()}; "
            f"run a script that uses flor first, or set {ENV_PROJECT}"
        )
    return Project(root)


def discover_or_create(start: Path | str | None = None) -> Project:
    """Used by recording runs: a fresh project gets its metadata folder on first use."""
    root = find_root(start)
    if root is None:
        root = Path(start or os.getcwd()).resolve()
    return Project(root).ensure()
