"""Shared helpers for driving the fixture script in throwaway projects."""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

from flor import logstore as ls
from flor.project import Project

FIXTURES = Path(__file__).parent / "fixtures"
TRAIN = FIXTURES / "train.py"

# statements spliced in at the fixture's marker comments
STATEMENTS = {
    "prefix": 'flor.log("init_w", model.w + seed)',
    "step": 'flor.log("gnorm", abs(grad))',
    "validation": 'flor.log("val_w2", model.w * 2)',
    "suffix": 'flor.log("final_b", model.b)',
}
VAR_AT = {"prefix": "init_w", "step": "gnorm", "validation": "val_w2", "suffix": "final_b"}


def splice(src: str, where: str, stmt: str) -> str:
    marker = f"# @{where}"
    out = []
    for line in src.splitlines(keepends=True):
        if line.strip() == marker:
            indent = line[: len(line) - len(line.lstrip())]
            out.append("".join(indent + s + "\n" for s in stmt.splitlines()))
        out.append(line)
    if len(out) == len(src.splitlines(keepends=True)):
        raise ValueError(f"no marker {marker}")
    return "".join(out)


def git(root: Path, *args: str) -> str:
    return subprocess.run(
        ["git", "-c", "user.name=t", "-c", "user.email=t@t", *args],
        cwd=root, check=True, capture_output=True, text=True,
    ).stdout.strip()


def new_project(base: Path, name: str = "proj", source: str | None = None) -> Project:
    root = base / name
    root.mkdir(parents=True)
    (root / "train.py").write_text(source if source is not None else TRAIN.read_text())
    git(root, "init", "-q", "-b", "main")
    git(root, "add", "train.py")
    git(root, "commit", "-qm", "baseline")
    return Project(root).ensure()


def script_env(project: Project, counters: Path | None = None, busy: dict | None = None, rho: str = "inf") -> dict:
    env = dict(os.environ)
    env.pop("FLOR_REPLAY_META", None)
    env["FLOR_PROJECT"] = str(project.root)
    env["FLOR_CKPT_RHO"] = rho
    env.pop("FIXTURE_COUNTERS", None)
    if counters is not None:
        env["FIXTURE_COUNTERS"] = str(counters)
    env["FIXTURE_BUSY"] = json.dumps(busy or {})
    return env


def record(project: Project, *kwargs: str, source: str | None = None, counters=None, busy=None, rho="inf") -> str:
    """Run the project's script in record mode; returns the new run's tstamp."""
    if source is not None:
        (project.root / "train.py").write_text(source)
    before = set(run_tstamps(project))
    cmd = [sys.executable, "train.py"]
    if kwargs:
        cmd += ["--kwargs", *kwargs]
    proc = subprocess.run(
        cmd, cwd=project.root, env=script_env(project, counters, busy, rho), capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    new = sorted(set(run_tstamps(project)) - before)
    assert len(new) == 1, new
    return new[0]


def replay_direct(project: Project, spec: str, tstamp: str, counters=None, busy=None, out=None, source=None):
    """Launch the script with --replay_flor in place (no workspace restore)."""
    if source is not None:
        (project.root / "train.py").write_text(source)
    env = script_env(project, counters, busy)
    out = out or project.root / f"replay_{spec.replace(':', '_').replace('/', 'of')}.json"
    env["FLOR_REPLAY_META"] = json.dumps({"tstamp": tstamp, "vars": [], "out": str(out)})
    proc = subprocess.run(
        [sys.executable, "train.py", "--replay_flor", spec], cwd=project.root, env=env, capture_output=True, text=True
    )
    return proc, Path(out)


def run_tstamps(project: Project) -> list[str]:
    if not project.db_path.exists():
        return []
    with ls.Database(project.db_path) as db:
        return [r[0] for r in db.query("SELECT tstamp FROM runs WHERE projid=? ORDER BY tstamp", (project.projid,))]


def facts(project: Project, name: str, tstamp: str | None = None) -> list[tuple]:
    """Sorted (ctx path, value) facts for ``name``, independent of run identity."""
    with ls.Database(project.db_path) as db:
        loops = {
            r["ctx_id"]: (r["parent_ctx_id"], r["loop_name"], r["loop_iteration"])
            for r in db.query("SELECT * FROM loops")
        }
        sql = "SELECT ctx_id, value FROM logs WHERE value_name=? AND projid=?"
        params: tuple = (name, project.projid)
        if tstamp is not None:
            sql += " AND tstamp=?"
            params += (tstamp,)
        rows = db.query(sql, params)
    out = []
    for r in rows:
        path = []
        c = r["ctx_id"]
        while c is not None:
            p, n, i = loops[c]
            path.append((n, i))
            c = p
        out.append((tuple(reversed(path)), r["value"]))
    return sorted(out)


def read_counters(path: Path) -> dict:
    return json.loads(Path(path).read_text())


def copy_project(project: Project, base: Path) -> Project:
    """Copy a project (repo and metadata) to ``base/<same name>``."""
    dest = base / project.root.name
    shutil.copytree(project.root, dest)
    return Project(dest)
