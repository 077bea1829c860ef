"""Run a confirmed replay plan: one subprocess per version (or per partition).

Each task restores its version into a throwaway workspace, writes the
propagated script there, and launches it with ``--replay_flor``. Replay
processes only write their own logfiles; this coordinator merges them into
the database one at a time once they finish.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import shutil
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import logstore as ls
from . import vcs
from .ckptstore import CheckpointStore
from .errors import FlorError
from .instrument import ENV_REPLAY_META
from .planner import ReplayPlan, ReplayTask
from .project import ENV_PROJECT, Project
from .scan import RANGE, ScanLevel, partition_iterations

log = logging.getLogger(__name__)

PENDING, RUNNING, DONE, FAILED = "pending", "running", "done", "failed"


def partition_range(
    store: CheckpointStore, run: tuple[str, str, str], lo: int, hi: int, n: int
) -> list[tuple[int, int, tuple[int, int]]]:
    """``(i, resume_checkpoint, (start, stop))`` for each worker of a range scan."""
    its = store.iterations(run)
    parts = partition_iterations(lo, hi, n, its)
    if n > 1 and len(parts) == 1:
        log.warning("only the pre-loop state is available for %s; range runs as one partition", run[1])
    return [(i, resume, (a, b)) for i, (resume, a, b) in enumerate(parts)]


@dataclass
class TaskResult:
    task: ReplayTask
    status: str = PENDING
    actual: float = 0.0
    inserted: int = 0
    message: str = ""
    logfiles: list[Path] = field(default_factory=list)

    @property
    def error_pct(self) -> float | None:
        if self.actual <= 0:
            return None
        return 100.0 * abs(self.actual - self.task.estimate) / self.actual

    def line(self) -> str:
        err = self.error_pct
        err_s = f"{err:.1f}%" if err is not None else "-"
        out = f"{self.task.vid[:8]} {self.task.scan} {self.status} {self.actual:.2f} {self.task.estimate:.2f} {err_s}"
        if self.message:
            out += f"  ({self.message})"
        return out


@dataclass
class ExecutionReport:
    results: list[TaskResult] = field(default_factory=list)
    wall: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r.status == DONE for r in self.results)

    @property
    def inserted(self) -> int:
        return sum(r.inserted for r in self.results)

    def render(self) -> str:
        lines = [r.line() for r in self.results]
        done = sum(r.status == DONE for r in self.results)
        lines.append(f"{done}/{len(self.results)} done, {self.inserted} values backfilled, {self.wall:.2f}s")
        return "\n".join(lines)


@dataclass
class _Job:
    result: TaskResult
    workspace: Path
    spec: ScanLevel
    out: Path
    vars: list[str] = field(default_factory=list)
    seconds: float = 0.0
    started: float = 0.0
    rc: int | None = None
    stderr: str = ""


def _kwargs(args: dict[str, str]) -> list[str]:
    if not args:
        return []
    return ["--kwargs", *(f"{k}={v}" for k, v in args.items())]


def _run_job(project: Project, job: _Job, python: str, env_extra: dict | None) -> _Job:
    task = job.result.task
    meta = {
        "tstamp": task.tstamp,
        "vars": job.vars,
        "out": str(job.out),
        "inserted": task.inserted,
        "vid": task.vid,
        "filename": task.filename,
    }
    env = dict(os.environ)
    env.update(env_extra or {})
    env[ENV_PROJECT] = str(project.root)
    env[ENV_REPLAY_META] = json.dumps(meta)
    cmd = [python, task.filename, *_kwargs(task.args), "--replay_flor", str(job.spec)]
    log.info("replay %s: %s", task.vid[:8], shlex.join(cmd))
    job.started = t0 = time.perf_counter()
    proc = subprocess.run(cmd, cwd=str(job.workspace), env=env, capture_output=True, text=True)
    job.seconds = time.perf_counter() - t0
    job.rc = proc.returncode
    job.stderr = proc.stderr
    return job


def _prepare(project: Project, task: ReplayTask, root: Path) -> Path:
    ws = vcs.restore(project, task.vid, root / f"{task.tstamp.replace(':', '')}_{task.vid[:8]}")
    target = ws / task.filename
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(task.source, encoding="utf-8")
    return ws


def execute(
    project: Project,
    plan: ReplayPlan,
    workers: int = 1,
    python: str | None = None,
    env: dict | None = None,
    keep_workspaces: bool = False,
) -> ExecutionReport:
    """Run every task of a confirmed plan and backfill its results."""
    if workers < 1:
        raise FlorError("workers must be at least 1")
    if not plan.confirmed:
        raise FlorError("plan has not been confirmed")
    python = python or sys.executable
    report = ExecutionReport([TaskResult(t) for t in plan.tasks])
    scratch = Path(tempfile.mkdtemp(prefix="flor-replay-"))
    store = CheckpointStore.local(project.obj_dir, read_only=True)
    t_start = time.perf_counter()
    jobs: list[_Job] = []
    try:
        for res in report.results:
            task = res.task
            try:
                ws = _prepare(project, task, scratch)
            except FlorError as e:
                res.status, res.message = FAILED, str(e)
                continue
            specs = [task.scan]
            if task.scan.kind == RANGE and task.partitions > 1:
                parts = partition_range(
                    store, (project.projid, task.tstamp, task.filename), task.scan.lo, task.scan.hi, task.partitions
                )
                specs = [task.scan.with_partition(i, len(parts)) for i, _, _ in parts]
            for k, spec in enumerate(specs):
                out = scratch / f"{task.tstamp.replace(':', '')}_{task.vid[:8]}_{k}.json"
                jobs.append(_Job(res, ws, spec, out, list(plan.vars)))
            res.status = RUNNING

        with ThreadPoolExecutor(max_workers=workers) as pool:
            finished = list(pool.map(lambda j: _run_job(project, j, python, env), jobs))

        by_task: dict[int, list[_Job]] = {}
        for job in finished:
            by_task.setdefault(id(job.result), []).append(job)
        with ls.Database(project.db_path) as db:
            for res in report.results:
                group = by_task.get(id(res), [])
                if res.status != RUNNING:
                    continue
                # first partition start to last partition end, however they were scheduled
                if group:
                    res.actual = max(j.started + j.seconds for j in group) - min(j.started for j in group)
                bad = [j for j in group if j.rc != 0]
                if bad:
                    tail = bad[0].stderr.strip().splitlines()[-1:] or [f"exit {bad[0].rc}"]
                    res.status, res.message = FAILED, tail[0]
                    continue
                try:
                    with db.transaction():
                        for j in group:
                            res.inserted += ls.backfill(j.out, db, plan.vars)
                            res.logfiles.append(j.out)
                except FlorError as e:
                    res.status, res.message = FAILED, str(e).splitlines()[0]
                    res.inserted = 0
                    continue
                res.status = DONE
        _keep_logfiles(project, report)
    finally:
        report.wall = time.perf_counter() - t_start
        if not keep_workspaces:
            shutil.rmtree(scratch, ignore_errors=True)
    return report


def _keep_logfiles(project: Project, report: ExecutionReport) -> None:
    """Move replay logfiles next to the recorded ones for provenance."""
    dest = project.meta / "replays"
    for res in report.results:
        moved = []
        for p in res.logfiles:
            if p.exists():
                dest.mkdir(parents=True, exist_ok=True)
                target = dest / p.name
                shutil.move(str(p), target)
                moved.append(target)
        res.logfiles = moved
