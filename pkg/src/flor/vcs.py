"""Shadow-branch versioning of the working directory.

Every recorded run snapshots the working tree (plus its logfile) onto
``flor.shadow.<branch>`` using a private index, so the user's branch, HEAD
and index are never touched. Historical versions are materialized into
throwaway directories with ``git archive``.
"""

from __future__ import annotations

import io
import os
import subprocess
import tarfile
import tempfile
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from .errors import FlorError, VersionNotFound
from .logstore import Database
from .project import META_DIR, Project

SHADOW_PREFIX = "flor.shadow."


@dataclass(frozen=True)
class VersionRecord:
    vid: str
    parent_vid: str | None
    ts_start: str
    ts_end: str | None
    branch: str
    projid: str = ""
    filename: str | None = None


def git(root: Path | str, *args: str, env: dict | None = None, check: bool = True) -> str:
    full_env = dict(os.environ)
    # a caller's GIT_DIR or GIT_INDEX_FILE must not redirect us
    for k in ("GIT_DIR", "GIT_WORK_TREE", "GIT_INDEX_FILE"):
        full_env.pop(k, None)
    if env:
        full_env.update(env)
    proc = subprocess.run(
        ["git", *args], cwd=str(root), env=full_env, capture_output=True, text=True
    )
    if check and proc.returncode != 0:
        raise FlorError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
    return proc.stdout.strip()


def ensure_repo(root: Path) -> None:
    top = git(root, "rev-parse", "--show-toplevel", check=False)
    if top and Path(top).resolve() == Path(root).resolve():
        return
    git(root, "init", "-q")


def current_branch(root: Path) -> str:
    name = git(root, "symbolic-ref", "--quiet", "--short", "HEAD", check=False)
    return name or "detached"


def shadow_branch(user_branch: str) -> str:
    return SHADOW_PREFIX + user_branch


def _identity_env(root: Path, tstamp: str) -> dict:
    env = {"GIT_AUTHOR_DATE": tstamp, "GIT_COMMITTER_DATE": tstamp}
    if not git(root, "config", "--get", "user.name", check=False):
        env["GIT_AUTHOR_NAME"] = env["GIT_COMMITTER_NAME"] = "flor"
    if not git(root, "config", "--get", "user.email", check=False):
        env["GIT_AUTHOR_EMAIL"] = env["GIT_COMMITTER_EMAIL"] = "flor@localhost"
    return env


def autocommit(project: Project, tstamp: str, db: Database | None = None) -> VersionRecord:
    """Commit the working tree to the shadow branch of the current branch."""
    root = project.root
    with FileLock(str(project.lock_path)):
        ensure_repo(root)
        user_branch = current_branch(root)
        branch = shadow_branch(user_branch)
        ref = f"refs/heads/{branch}"
        parent = git(root, "rev-parse", "--verify", "-q", ref, check=False) or None
        fd, index = tempfile.mkstemp(prefix="shadow-", suffix=".index", dir=project.meta)
        os.close(fd)
        os.unlink(index)
        env = {"GIT_INDEX_FILE": index}
        try:
            git(root, "add", "-A", "--", ".", f":(exclude){META_DIR}", env=env)
            if project.logs_dir.is_dir() and any(project.logs_dir.iterdir()):
                git(root, "add", "-f", "--", f"{META_DIR}/logs", env=env)
            tree = git(root, "write-tree", env=env)
        finally:
            if os.path.exists(index):
                os.unlink(index)
        cargs = ["commit-tree", tree, "-m", f"{project.projid}::{tstamp}"]
        if parent:
            cargs[2:2] = ["-p", parent]
        vid = git(root, *cargs, env=_identity_env(root, tstamp))
        git(root, "update-ref", ref, vid, parent or "")
    rec = VersionRecord(vid, parent, tstamp, None, branch, project.projid)
    if db is not None:
        with db.transaction():
            db.execute(
                "INSERT OR REPLACE INTO ts2vid (projid, ts_start, vid, parent_vid, branch) VALUES (?, ?, ?, ?, ?)",
                (project.projid, tstamp, vid, parent, branch),
            )
    return rec


def _check_vid(root: Path, vid: str) -> str:
    full = git(root, "rev-parse", "--verify", "-q", f"{vid}^{{commit}}", check=False)
    if not full:
        raise VersionNotFound(f"unknown version {vid!r}")
    branches = git(
        root, "branch", "--list", f"{SHADOW_PREFIX}*", "--contains", full, "--format=%(refname:short)", check=False
    )
    if not branches:
        raise VersionNotFound(f"version {vid[:8]} is not on a shadow branch")
    return full


def restore(project: Project, vid: str, dest: Path | str | None = None) -> Path:
    """Materialize a shadow commit's tree into a fresh directory."""
    full = _check_vid(project.root, vid)
    proc = subprocess.run(
        ["git", "archive", "--format=tar", full], cwd=str(project.root), capture_output=True
    )
    if proc.returncode != 0:
        raise FlorError(f"git archive {vid[:8]} failed: {proc.stderr.decode().strip()}")
    if dest is None:
        dest = Path(tempfile.mkdtemp(prefix=f"flor-{full[:8]}-"))
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    with tarfile.open(fileobj=io.BytesIO(proc.stdout)) as tar:
        if hasattr(tarfile, "data_filter"):
            tar.extractall(dest, filter="data")
        else:  # pragma: no cover
            tar.extractall(dest)
    return dest


def show(project: Project, vid: str, path: str) -> str:
    """Contents of ``path`` as of version ``vid``."""
    full = _check_vid(project.root, vid)
    proc = subprocess.run(
        ["git", "show", f"{full}:{path}"], cwd=str(project.root), capture_output=True
    )
    if proc.returncode != 0:
        raise VersionNotFound(f"{path} does not exist in version {vid[:8]}")
    return proc.stdout.decode("utf-8")


def _records(db: Database, projid: str) -> list[VersionRecord]:
    rows = db.query(
        "SELECT t.ts_start, t.vid, t.parent_vid, t.branch,"
        " LEAD(t.ts_start) OVER (ORDER BY t.ts_start) AS ts_end, r.filename"
        " FROM ts2vid t LEFT JOIN runs r ON r.projid = t.projid AND r.tstamp = t.ts_start"
        " WHERE t.projid = ? ORDER BY t.ts_start",
        (projid,),
    )
    return [
        VersionRecord(r["vid"], r["parent_vid"], r["ts_start"], r["ts_end"], r["branch"], projid, r["filename"])
        for r in rows
    ]


def lookup(db: Database, projid: str, tstamp: str) -> str:
    """The version whose ``[ts_start, ts_end)`` interval contains ``tstamp``."""
    for rec in _records(db, projid):
        if rec.ts_start <= tstamp and (rec.ts_end is None or tstamp < rec.ts_end):
            return rec.vid
    raise VersionNotFound(f"no version covers {tstamp}")


def versions(db: Database, projid: str, predicate: str | None = None) -> list[VersionRecord]:
    recs = _records(db, projid)
    if not predicate or not predicate.strip():
        return recs
    from .views import parse_predicate

    pred = parse_predicate(predicate)
    out = []
    for rec in recs:
        row = {"projid": rec.projid, "tstamp": rec.ts_start, "filename": rec.filename, "vid": rec.vid}
        pred.check_columns(row.keys())
        if pred.evaluate(row):
            out.append(rec)
    return out


def resolve_prefix(db: Database, projid: str, prefix: str) -> list[VersionRecord]:
    """Versions whose vid or tstamp starts with ``prefix``."""
    return [r for r in _records(db, projid) if r.vid.startswith(prefix) or r.ts_start.startswith(prefix)]
