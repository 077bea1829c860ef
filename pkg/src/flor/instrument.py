"""The in-script API: ``log``, ``arg``, ``loop`` and ``checkpointing``.

During a recording run these calls capture values, hyper-parameters, loop
structure, timings and checkpoints. When the same script is launched with
``--replay_flor SCANSPEC`` the identical call sites become replay
directives: the outermost named loop is skipped, stepped through
checkpoints, or executed over a sub-range, and nested loops may be elided.

One :class:`RunContext` exists per process. It is created lazily on the
first API call, or explicitly with :func:`activate` (used by tests).
"""

from __future__ import annotations

import atexit
import json
import logging
import math
import os
import pickle
import sys
import time
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterable, Iterator

from . import logstore as ls
from .ckptstore import CheckpointEntry, CheckpointSet, CheckpointStore, Serializer
from .errors import ArgParseError, FlorError, MissingCheckpoint, UnknownArg
from .project import Project, discover_or_create, find_root
from .scan import PREFIX, RANGE, SUFFIX, VALIDATION, ScanLevel, partition_iterations

log_ = logging.getLogger(__name__)

RECORD = "record"
REPLAY = "replay"

ENV_TSTAMP = "FLOR_TSTAMP"
ENV_REPLAY_META = "FLOR_REPLAY_META"
ENV_CKPT_RHO = "FLOR_CKPT_RHO"
ENV_CKPT_ASYNC = "FLOR_CKPT_ASYNC"

DEFAULT_RHO = 0.25
TSTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S"


# ---------------------------------------------------------------------------
# command line


def split_argv(argv: list[str]) -> tuple[list[str], dict[str, str], str | None]:
    """Remove ``--kwargs k=v ...`` and ``--replay_flor SPEC`` from ``argv``."""
    rest: list[str] = []
    kwargs: dict[str, str] = {}
    replay: str | None = None
    i = 0
    while i < len(argv):
        a = argv[i]
        if a == "--kwargs":
            i += 1
            while i < len(argv) and not argv[i].startswith("--"):
                tok = argv[i]
                if "=" not in tok:
                    raise ArgParseError(f"--kwargs expects name=value, got {tok!r}")
                k, v = tok.split("=", 1)
                kwargs[k] = v
                i += 1
            continue
        if a == "--replay_flor":
            if i + 1 >= len(argv):
                raise ArgParseError("--replay_flor needs a scan spec")
            replay = argv[i + 1]
            i += 2
            continue
        if a.startswith("--replay_flor="):
            replay = a.split("=", 1)[1]
            i += 1
            continue
        rest.append(a)
        i += 1
    return rest, kwargs, replay


def parse_typed(name: str, token: str, default: Any) -> Any:
    kind = type(default)
    try:
        if kind is bool:
            low = token.strip().lower()
            if low in ("true", "1"):
                return True
            if low in ("false", "0"):
                return False
            raise ValueError(token)
        if kind is int:
            return int(token)
        if kind is float:
            return float(token)
        return token
    except ValueError:
        raise ArgParseError(f"cannot parse {name}={token!r} as {kind.__name__}") from None


# ---------------------------------------------------------------------------
# run state


@dataclass
class ExecMode:
    kind: str = RECORD
    scan: ScanLevel | None = None
    kwargs: dict[str, str] = field(default_factory=dict)

    @property
    def target_pid(self) -> tuple[int, int] | None:
        return self.scan.partition if self.scan is not None else None

    @property
    def is_replay(self) -> bool:
        return self.kind == REPLAY


@dataclass
class ProfileAccumulator:
    t_prefix: float | None = None
    t_iteration: dict[str, list[float]] = field(default_factory=dict)
    t_ckpt_save: dict[int, float] = field(default_factory=dict)
    t_ckpt_load: dict[int, float] = field(default_factory=dict)
    t_suffix: float | None = None


def process_start_time() -> float:
    """Wall-clock time at which this process started.

    Measured as the process age (``/proc/uptime`` minus the start tick in
    ``/proc/self/stat``) so it does not depend on the boot time, which the
    kernel only reports to whole seconds. Falls back to flor's import time.
    """
    try:
        with open("/proc/uptime") as f:
            uptime = float(f.read().split()[0])
        with open("/proc/self/stat") as f:
            stat = f.read()
        # the command name may contain spaces; fields resume after ')'
        fields = stat[stat.rindex(")") + 2 :].split()
        started = int(fields[19]) / os.sysconf("SC_CLK_TCK")
        age = uptime - started
        if 0 <= age < time.time() - _IMPORT_TIME + 3600:
            return time.time() - age
    except (OSError, ValueError, IndexError):
        pass
    return _IMPORT_TIME


_IMPORT_TIME = time.time()


@dataclass
class _Validation:
    iteration: int
    available: bool
    frame: ls.LoopFrame
    loaded: bool = False


class _TerminateReplay(SystemExit):
    """Ends a replay process cleanly once its scan has nothing left to do."""

    def __init__(self) -> None:
        super().__init__(0)


class RunContext:
    def __init__(
        self,
        project: Project,
        filename: str,
        mode: ExecMode | None = None,
        tstamp: str | None = None,
        start_time: float | None = None,
        replay_meta: dict | None = None,
        rho: float | None = None,
    ):
        self.project = project.ensure()
        self.projid = project.projid
        self.filename = filename
        self.mode = mode or ExecMode()
        self.start_time = start_time if start_time is not None else time.time()
        self.replay_meta = dict(replay_meta or {})
        self.records: list = []
        self.stack: list[ls.LoopFrame] = []
        self.profile = ProfileAccumulator()
        self.status = "ok"
        self.finalized = False
        self.logfile: Path | None = None
        self.vid: str | None = None

        self._next_ctx = 1
        self._main_seen = False
        self._main_frame: ls.LoopFrame | None = None
        self._main_exit: float | None = None
        self._nested_time: dict[str, float] = {}
        self._validation: _Validation | None = None
        self._serializers: dict[str, Serializer] | None = None
        self._history: dict[str, str] = {}
        self._hist_entries: int | None = None
        self.counters: dict[str, int] = {}

        if rho is None:
            env = os.environ.get(ENV_CKPT_RHO)
            rho = float(env) if env else DEFAULT_RHO
        self.rho = rho
        self._async = os.environ.get(ENV_CKPT_ASYNC, "") not in ("", "0")
        self._pool: ThreadPoolExecutor | None = None
        self._pending: list[Future] = []

        self.store = CheckpointStore.local(project.obj_dir, read_only=self.mode.is_replay)
        if self.mode.is_replay:
            self.tstamp = self.replay_meta.get("tstamp") or tstamp or self._latest_run()
            self._load_history()
        else:
            self.tstamp = self._unique_tstamp(tstamp)

    # -- identity ---------------------------------------------------------

    @property
    def run(self) -> tuple[str, str, str]:
        return (self.projid, self.tstamp, self.filename)

    def _db(self) -> ls.Database:
        return ls.Database(self.project.db_path)

    def _unique_tstamp(self, tstamp: str | None) -> str:
        if tstamp is None:
            tstamp = datetime.fromtimestamp(self.start_time).strftime(TSTAMP_FORMAT)
        if not self.project.db_path.exists():
            return tstamp
        with self._db() as db:
            taken = {
                r[0]
                for r in db.query("SELECT tstamp FROM runs WHERE projid=?", (self.projid,))
                + db.query("SELECT ts_start FROM ts2vid WHERE projid=?", (self.projid,))
            }
        t = datetime.strptime(tstamp, TSTAMP_FORMAT)
        while t.strftime(TSTAMP_FORMAT) in taken:
            t += timedelta(seconds=1)
        return t.strftime(TSTAMP_FORMAT)

    def _latest_run(self) -> str:
        with self._db() as db:
            rows = db.query(
                "SELECT tstamp FROM runs WHERE projid=? AND filename=? ORDER BY tstamp DESC LIMIT 1",
                (self.projid, self.filename),
            )
        if not rows:
            raise FlorError(f"nothing to replay: no recorded run of {self.filename}")
        return rows[0][0]

    def _load_history(self) -> None:
        if not self.project.db_path.exists():
            raise FlorError(f"no history database at {self.project.db_path}")
        with self._db() as db:
            rows = db.query(
                "SELECT value_name, value FROM logs WHERE projid=? AND tstamp=? AND value_type=?",
                (self.projid, self.tstamp, ls.HYPERPARAM),
            )
            self._history = {r[0]: r[1] for r in rows}
            ent = db.query(
                "SELECT loop_entries FROM loops WHERE projid=? AND tstamp=? AND parent_ctx_id IS NULL"
                " ORDER BY ctx_id LIMIT 1",
                (self.projid, self.tstamp),
            )
            self._hist_entries = ent[0][0] if ent else None
            fn = db.query("SELECT filename FROM runs WHERE projid=? AND tstamp=?", (self.projid, self.tstamp))
        if fn:
            # checkpoints are keyed by the recorded filename
            self.filename = fn[0][0]

    # -- records ----------------------------------------------------------

    def _emit(self, name: str, value: str, value_type: int, frame: ls.LoopFrame | None = None) -> None:
        self.records.append(ls.LogRecord(name, value, value_type, frame))

    def _timing(self, name: str, seconds: float, frame: ls.LoopFrame | None = None) -> None:
        self._emit(ls.PROFILE_PREFIX + name, repr(max(0.0, seconds)), ls.PROFILE, frame)

    def _push(self, name: str, iteration: int, entries: int | None) -> ls.LoopFrame:
        parent = self.stack[-1] if self.stack else None
        frame = ls.LoopFrame(self._next_ctx, name, iteration, entries, parent)
        self._next_ctx += 1
        self.stack.append(frame)
        self.records.append(ls.LoopEvent(frame))
        return frame

    def _pop(self, frame: ls.LoopFrame) -> None:
        if self.stack and self.stack[-1] is frame:
            self.stack.pop()
        elif frame in self.stack:
            # an inner generator was abandoned without being closed
            del self.stack[self.stack.index(frame) :]

    # -- API ----------------------------------------------------------------

    def log(self, name: str, value: Any) -> Any:
        if not isinstance(name, str) or not name:
            raise FlorError("log name must be non-empty text")
        if name.startswith(ls.RESERVED):
            raise FlorError(f"names starting with {ls.RESERVED!r} are reserved")
        fv = ls.format_value(value)
        if fv is not None:
            text, vtype = fv
        else:
            vtype = ls.BLOB_REF
            try:
                text = "blob:" + self.store.put_blob(pickle.dumps(value))
            except Exception:
                try:
                    text = "repr:" + repr(value)
                except Exception:
                    text = "repr:<" + type(value).__name__ + ">"
        self._emit(name, text, vtype, self.stack[-1] if self.stack else None)
        return value

    def arg(self, name: str, default: Any) -> Any:
        if type(default) not in (int, float, bool, str):
            raise FlorError(f"arg {name!r}: default must be int, float, bool or str")
        if self.mode.is_replay:
            if name not in self._history:
                raise UnknownArg(f"unknown arg in history: {name!r} was never logged by run {self.tstamp}")
            value = parse_typed(name, self._history[name], default)
            given = self.mode.kwargs.get(name)
            if given is not None and parse_typed(name, given, default) != value:
                raise FlorError(
                    f"arg {name!r}: replay uses the recorded value {self._history[name]!r}; "
                    f"override {given!r} is not allowed"
                )
        elif name in self.mode.kwargs:
            value = parse_typed(name, self.mode.kwargs[name], default)
        else:
            value = default
        self._emit(name, ls.format_value(value)[0], ls.HYPERPARAM, self.stack[-1] if self.stack else None)
        return value

    @contextmanager
    def checkpointing(self, **objects: Any) -> Iterator[None]:
        sers = {name: Serializer(name, obj) for name, obj in objects.items()}
        if self._main_seen:
            log_.warning("checkpointing() entered after the outermost loop started; it has no effect")
        prev = self._serializers
        self._serializers = sers
        try:
            yield
        finally:
            self._serializers = prev

    def loop(self, name: str, vals: Iterable) -> Iterator:
        if not isinstance(name, str) or not name:
            raise FlorError("loop name must be non-empty text")
        if name in ls.RESERVED_LOOP_NAMES:
            raise FlorError(f"loop name {name!r} is reserved")
        if any(f.loop_name == name for f in self.stack):
            raise FlorError(f"loop {name!r} is already active")
        if not self.stack and not self._main_seen:
            self._main_seen = True
            return self._main_loop(name, vals)
        return self._inner_loop(name, vals)

    # -- loops --------------------------------------------------------------

    def _inner_loop(self, name: str, vals: Iterable) -> Iterator:
        val = self._validation
        if val is not None and self.stack and self.stack[0] is val.frame and val.available:
            if not val.loaded:
                self._restore_at(val.iteration, val.frame)
                val.loaded = True
            return
        direct_child = self._main_frame is not None and self.stack and self.stack[-1] is self._main_frame
        entries = len(vals) if hasattr(vals, "__len__") else None
        samples = self.profile.t_iteration.setdefault(name, [])
        frames: list[ls.LoopFrame] = []
        start = time.perf_counter()
        try:
            for i, v in enumerate(vals):
                t0 = time.perf_counter()
                frame = self._push(name, i, entries)
                frames.append(frame)
                try:
                    yield v
                finally:
                    self._pop(frame)
                    samples.append(time.perf_counter() - t0)
        finally:
            if entries is None:
                for f in frames:
                    f.loop_entries = len(frames)
            if direct_child:
                self._nested_time[name] = self._nested_time.get(name, 0.0) + time.perf_counter() - start

    def _main_loop(self, name: str, vals: Iterable) -> Iterator:
        self.profile.t_prefix = time.time() - self.start_time
        self._timing("prefix", self.profile.t_prefix)
        entries = len(vals) if hasattr(vals, "__len__") else None
        if self.mode.is_replay:
            if self._hist_entries is not None and entries is not None and entries != self._hist_entries:
                raise FlorError(
                    f"loop {name!r} has {entries} entries but the recorded run had {self._hist_entries}; "
                    "its bounds changed since recording"
                )
            if entries is None:
                entries = self._hist_entries
            gen = self._replay_main(name, vals, entries)
        else:
            gen = self._record_main(name, vals, entries)
        try:
            yield from gen
        finally:
            self._main_exit = time.perf_counter()
            self._main_frame = None
            self._validation = None

    def _iterate(self, name: str, vals: Iterable, entries: int | None, start: int = 0, stop: int | None = None,
                 on_boundary=None):
        """Run outer iterations ``[start, stop)`` in full; yields (frame, value).

        ``on_boundary(frame, seconds)`` runs after each completed iteration.
        """
        samples = self.profile.t_iteration.setdefault(name, [])
        frames: list[ls.LoopFrame] = []
        it = iter(vals)
        i = 0
        while stop is None or i < stop:
            t0 = time.perf_counter()
            try:
                v = next(it)
            except StopIteration:
                break
            if i < start:
                i += 1
                continue
            frame = self._push(name, i, entries)
            frames.append(frame)
            self._main_frame = frame
            self._nested_time = {}
            try:
                yield frame, v
            finally:
                self._pop(frame)
            dt = time.perf_counter() - t0
            samples.append(dt)
            self._timing(name, dt, frame)
            for nested, secs in self._nested_time.items():
                self._timing(nested, secs, frame)
            if on_boundary is not None:
                on_boundary(frame, dt)
            i += 1
        if entries is None:
            for f in frames:
                f.loop_entries = i

    def _record_main(self, name: str, vals: Iterable, entries: int | None):
        state = {"since": 0.0, "last": None, "saved": False}

        def boundary(frame: ls.LoopFrame, dt: float) -> None:
            state["since"] += dt
            state["last"] = frame
            state["saved"] = False
            if self._serializers and self._should_checkpoint(state["since"]):
                self._save(frame)
                state["since"] = 0.0
                state["saved"] = True

        for _, v in self._iterate(name, vals, entries, on_boundary=boundary):
            yield v
        # the end state must always be restorable
        if state["last"] is not None and self._serializers and not state["saved"]:
            self._save(state["last"])

    def _should_checkpoint(self, since_last: float) -> bool:
        saves = list(self.profile.t_ckpt_save.values())
        if not saves:
            return True
        if math.isinf(self.rho):
            return True
        estimate = sum(saves) / len(saves)
        return since_last >= estimate / self.rho

    def _save(self, frame: ls.LoopFrame) -> None:
        t0 = time.perf_counter()
        blobs = {name: ser.capture() for name, ser in self._serializers.items()}

        def write() -> None:
            for name, blob in blobs.items():
                self.store.put(
                    CheckpointEntry(
                        self.projid, self.tstamp, self.filename, frame.ctx_id, name, blob,
                        frame.loop_name, frame.loop_iteration,
                    )
                )

        if self._async:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="flor-ckpt")
            self._pending.append(self._pool.submit(write))
        else:
            write()
        dt = time.perf_counter() - t0
        self.profile.t_ckpt_save[frame.loop_iteration] = dt
        self._timing("ckpt_save", dt, frame)

    # -- replay -------------------------------------------------------------

    def _restore(self, cs: CheckpointSet, frame: ls.LoopFrame) -> None:
        t0 = time.perf_counter()
        for name, ser in (self._serializers or {}).items():
            entry = cs.entries.get(name)
            if entry is None:
                raise MissingCheckpoint(
                    f"missing checkpoint for ctx {frame.loop_name}={cs.iteration}: object {name!r}"
                )
            ser.restore(entry.contents)
        dt = time.perf_counter() - t0
        self.profile.t_ckpt_load[cs.iteration] = dt
        self._timing("ckpt_load", dt, frame)

    def _restore_at(self, iteration: int, frame: ls.LoopFrame) -> None:
        cs = self.store.at(self.run, iteration)
        if cs is None:
            raise MissingCheckpoint(f"missing checkpoint for ctx {frame.loop_name}={iteration}")
        self._restore(cs, frame)

    def _detached_frame(self, name: str, iteration: int, entries: int | None) -> ls.LoopFrame:
        frame = ls.LoopFrame(self._next_ctx, name, iteration, entries, None)
        self._next_ctx += 1
        return frame

    def _replay_main(self, name: str, vals: Iterable, entries: int | None):
        scan = self.mode.scan
        if scan.kind == PREFIX:
            raise _TerminateReplay()

        if not self._serializers:
            # nothing was checkpointed: every scan re-executes the loop
            stop = None
            if scan.kind == RANGE:
                stop = scan.hi if scan.partition is None else self._sub_range(scan, entries, [])[2]
            for _, v in self._iterate(name, vals, entries, 0, stop):
                yield v
            if stop is not None and (entries is None or stop < entries):
                raise _TerminateReplay()
            return

        its = self.store.iterations(self.run)
        if scan.kind == SUFFIX:
            if not its:
                hint = f"range:0:{entries}" if entries else "prefix"
                raise MissingCheckpoint(f"missing checkpoint for ctx {name}: run {self.tstamp} has none", hint)
            last = its[-1]
            self._restore(self.store.at(self.run, last), self._detached_frame(name, last, entries))
            if entries is not None and last >= entries - 1:
                return
            for _, v in self._iterate(name, vals, entries, last + 1):
                yield v
        elif scan.kind == VALIDATION:
            available = set(its)
            for frame, v in self._iterate(name, vals, entries):
                self._validation = _Validation(frame.loop_iteration, frame.loop_iteration in available, frame)
                try:
                    yield v
                finally:
                    self._validation = None
        elif scan.kind == RANGE:
            resume, start, stop = self._sub_range(scan, entries, its)
            if resume >= 0:
                self._restore(self.store.at(self.run, resume), self._detached_frame(name, resume, entries))
            for _, v in self._iterate(name, vals, entries, resume + 1, stop):
                yield v
            if entries is None or stop < entries:
                raise _TerminateReplay()

    def _sub_range(self, scan: ScanLevel, entries: int | None, its: list[int]) -> tuple[int, int, int]:
        hi = scan.hi if entries is None else min(scan.hi, entries)
        if scan.partition is None:
            below = [c for c in its if c < scan.lo]
            return (below[-1] if below else -1, scan.lo, hi)
        i, n = scan.partition
        parts = partition_iterations(scan.lo, hi, n, its)
        if i >= len(parts):
            # fewer feasible partitions than workers: this worker has no work
            raise _TerminateReplay()
        return parts[i]

    # -- end of run ---------------------------------------------------------

    def finalize(self, status: str | None = None) -> Path | None:
        if self.finalized:
            return self.logfile
        self.finalized = True
        if status is not None:
            self.status = status
        for fut in self._pending:
            fut.result()
        if self._pool is not None:
            self._pool.shutdown()
        now = time.perf_counter()
        if self.profile.t_prefix is None:
            self.profile.t_prefix = time.time() - self.start_time
            self._timing("prefix", self.profile.t_prefix)
            self.profile.t_suffix = 0.0
        elif self._main_exit is not None:
            self.profile.t_suffix = now - self._main_exit
        else:
            self.profile.t_suffix = 0.0
        self._timing("suffix", self.profile.t_suffix)
        self._emit(ls.STATUS_NAME, self.status, ls.RUN_STATUS)

        if self.mode.is_replay:
            replay = {
                "scan": str(self.mode.scan),
                "vars": list(self.replay_meta.get("vars", [])),
                "vid": self.replay_meta.get("vid"),
                "inserted": self.replay_meta.get("inserted", []),
            }
            header = ls.RunHeader(self.projid, self.tstamp, self.filename, REPLAY, self.status, replay)
            out = self.replay_meta.get("out")
            if out is None:
                safe = str(self.mode.scan).replace(":", "_").replace("/", "of")
                out = self.project.meta / "replay" / f"{self.tstamp.replace(':', '')}_{safe}.json"
            self.logfile = ls.write_logfile(out, header, self.records)
            return self.logfile

        from . import vcs

        header = ls.RunHeader(self.projid, self.tstamp, self.filename, RECORD, self.status)
        stem = Path(self.filename).stem
        self.logfile = ls.write_logfile(
            self.project.logs_dir / f"{self.tstamp.replace(':', '')}_{stem}.json", header, self.records
        )
        with self._db() as db:
            self.vid = vcs.autocommit(self.project, self.tstamp, db).vid
            ls.unpack(self.logfile, db)
        return self.logfile


# ---------------------------------------------------------------------------
# process-level context

_ctx: RunContext | None = None
_argv_kwargs: dict[str, str] = {}
_argv_replay: str | None = None


def _strip_process_argv() -> None:
    global _argv_kwargs, _argv_replay
    if "--kwargs" not in sys.argv and not any(a.startswith("--replay_flor") for a in sys.argv):
        return
    rest, _argv_kwargs, _argv_replay = split_argv(sys.argv)
    sys.argv[:] = rest


def _script_filename(root: Path) -> str:
    main = sys.argv[0] if sys.argv and sys.argv[0] else ""
    if not main or main in ("-c", "-m") or not os.path.exists(main):
        return "<interactive>"
    path = Path(main).resolve()
    for base in (root, Path.cwd()):
        try:
            return path.relative_to(base.resolve()).as_posix()
        except ValueError:
            continue
    return path.name


def _create_from_process() -> RunContext:
    meta = json.loads(os.environ.get(ENV_REPLAY_META, "") or "{}")
    if _argv_replay is not None:
        mode = ExecMode(REPLAY, ScanLevel.parse(_argv_replay), dict(_argv_kwargs))
        root = find_root()
        if root is None:
            raise FlorError("replay needs an existing project; set FLOR_PROJECT")
        project = Project(root)
        filename = meta.get("filename") or _script_filename(Path.cwd())
    else:
        mode = ExecMode(RECORD, None, dict(_argv_kwargs))
        project = discover_or_create()
        filename = _script_filename(project.root)
    return RunContext(
        project,
        filename,
        mode,
        tstamp=os.environ.get(ENV_TSTAMP) if mode.kind == RECORD else None,
        start_time=process_start_time(),
        replay_meta=meta,
    )


def _on_exit() -> None:
    ctx = _ctx
    if ctx is None or ctx.finalized:
        return
    try:
        ctx.finalize()
    except Exception:
        import traceback

        print("flor: failed to finalize run:", file=sys.stderr)
        traceback.print_exc()


_prev_hook = sys.excepthook


def _excepthook(tp, value, tb) -> None:
    if _ctx is not None and not isinstance(value, SystemExit):
        _ctx.status = "failed"
    _prev_hook(tp, value, tb)


def current() -> RunContext:
    global _ctx
    if _ctx is None:
        _ctx = _create_from_process()
        atexit.register(_on_exit)
        sys.excepthook = _excepthook
    return _ctx


def activate(ctx: RunContext) -> RunContext:
    """Install ``ctx`` as this process's run (tests and embedding)."""
    global _ctx
    _ctx = ctx
    return ctx


def reset() -> None:
    global _ctx
    _ctx = None


def log(name: str, value: Any) -> Any:
    return current().log(name, value)


def arg(name: str, default: Any) -> Any:
    return current().arg(name, default)


def loop(name: str, vals: Iterable) -> Iterator:
    return current().loop(name, vals)


def checkpointing(**objects: Any):
    return current().checkpointing(**objects)


def finalize_run(status: str | None = None) -> Path | None:
    return current().finalize(status)


_strip_process_argv()
