"""Run logfiles and their normalized relational form.

A logfile is one UTF-8 JSON document per run: a header followed by an
ordered ``records`` list, one record per line. Records are either loop
iteration events or logged values; both carry their loop context as a
nested object (innermost first, parents chained through ``parent``).

Unpacking flattens those chains into the ``loops`` table and writes values
to ``logs``. Replays are merged back with :func:`backfill`, which only adds
cells that were never materialized.
"""

from __future__ import annotations

import json
import logging
import math
import sqlite3
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

from .errors import BackfillConflict, FlorError, MalformedLogfile

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

METRIC = 1
HYPERPARAM = 2
BLOB_REF = 3
PROFILE = 4
RUN_STATUS = 5
VALUE_TYPES = (METRIC, HYPERPARAM, BLOB_REF, PROFILE, RUN_STATUS)

RESERVED = "flor::"
PROFILE_PREFIX = "flor::delta::"
T_PREFIX = PROFILE_PREFIX + "prefix"
T_SUFFIX = PROFILE_PREFIX + "suffix"
T_CKPT_SAVE = PROFILE_PREFIX + "ckpt_save"
T_CKPT_LOAD = PROFILE_PREFIX + "ckpt_load"
STATUS_NAME = "flor::status"
RESERVED_LOOP_NAMES = {"prefix", "suffix", "ckpt_save", "ckpt_load"}

DIMENSIONS = ("projid", "tstamp", "filename")

_SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
    projid TEXT NOT NULL,
    tstamp TEXT NOT NULL,
    filename TEXT NOT NULL,
    status TEXT NOT NULL,
    logfile TEXT,
    PRIMARY KEY (projid, tstamp)
);
CREATE TABLE IF NOT EXISTS loops (
    ctx_id INTEGER PRIMARY KEY,
    parent_ctx_id INTEGER REFERENCES loops(ctx_id),
    loop_name TEXT NOT NULL,
    loop_entries INTEGER,
    loop_iteration INTEGER NOT NULL,
    projid TEXT NOT NULL,
    tstamp TEXT NOT NULL,
    filename TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS loops_run ON loops(projid, tstamp);
CREATE TABLE IF NOT EXISTS logs (
    projid TEXT NOT NULL,
    tstamp TEXT NOT NULL,
    filename TEXT NOT NULL,
    ctx_id INTEGER REFERENCES loops(ctx_id),
    value_name TEXT NOT NULL,
    value TEXT,
    value_type INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS logs_name ON logs(value_name);
CREATE INDEX IF NOT EXISTS logs_run ON logs(projid, tstamp);
CREATE TABLE IF NOT EXISTS ts2vid (
    projid TEXT NOT NULL,
    ts_start TEXT NOT NULL,
    vid TEXT NOT NULL,
    parent_vid TEXT,
    branch TEXT NOT NULL,
    PRIMARY KEY (projid, ts_start)
);
"""


class Database:
    """Thin statement interface over the embedded store at ``.flor/main.db``."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(str(self.path), timeout=60, isolation_level=None)
        self.conn.row_factory = sqlite3.Row
        self.conn.execute("PRAGMA foreign_keys = ON")
        self.conn.executescript(_SCHEMA)
        self._depth = 0

    def close(self) -> None:
        self.conn.close()

    def __enter__(self) -> Database:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def execute(self, sql: str, params: Sequence[Any] = ()) -> sqlite3.Cursor:
        return self.conn.execute(sql, params)

    def query(self, sql: str, params: Sequence[Any] = ()) -> list[sqlite3.Row]:
        return self.conn.execute(sql, params).fetchall()

    @contextmanager
    def transaction(self) -> Iterator[Database]:
        if self._depth:
            self._depth += 1
            try:
                yield self
            finally:
                self._depth -= 1
            return
        self.conn.execute("BEGIN IMMEDIATE")
        self._depth = 1
        try:
            yield self
        except BaseException:
            self.conn.execute("ROLLBACK")
            raise
        else:
            self.conn.execute("COMMIT")
        finally:
            self._depth = 0


# ---------------------------------------------------------------------------
# values


def format_value(value: Any) -> tuple[str, int] | None:
    """Text form of a natively loggable value, or None if it needs a blob."""
    if isinstance(value, bool):
        return str(value), METRIC
    if type(value).__module__ == "numpy" and hasattr(value, "item") and getattr(value, "ndim", 1) == 0:
        value = value.item()
    if isinstance(value, bool):
        return str(value), METRIC
    if isinstance(value, int):
        return str(value), METRIC
    if isinstance(value, float):
        # repr is the shortest string that round-trips
        return repr(value), METRIC
    if isinstance(value, str):
        return value, METRIC
    return None


# ---------------------------------------------------------------------------
# in-memory records


@dataclass(eq=False)
class LoopFrame:
    ctx_id: int
    loop_name: str
    loop_iteration: int
    loop_entries: int | None = None
    parent: LoopFrame | None = None

    @property
    def parent_ctx_id(self) -> int | None:
        return self.parent.ctx_id if self.parent is not None else None

    def chain(self) -> list[LoopFrame]:
        """Frames from the outermost loop down to this one."""
        out, f = [], self
        while f is not None:
            out.append(f)
            f = f.parent
        return out[::-1]

    def path(self) -> tuple[tuple[str, int], ...]:
        return tuple((f.loop_name, f.loop_iteration) for f in self.chain())

    def encode(self) -> dict:
        return {
            "name": self.loop_name,
            "iteration": self.loop_iteration,
            "entries": self.loop_entries,
            "ctx_id": self.ctx_id,
            "parent": self.parent.encode() if self.parent is not None else None,
        }


@dataclass
class LogRecord:
    value_name: str
    value: str
    value_type: int
    frame: LoopFrame | None = None

    @property
    def ctx_id(self) -> int | None:
        return self.frame.ctx_id if self.frame is not None else None

    def encode(self) -> dict:
        return {
            "kind": "log",
            "value_name": self.value_name,
            "value": self.value,
            "value_type": self.value_type,
            "loop": self.frame.encode() if self.frame is not None else None,
        }


@dataclass
class LoopEvent:
    frame: LoopFrame

    def encode(self) -> dict:
        return {"kind": "loop", "loop": self.frame.encode()}


@dataclass
class RunHeader:
    projid: str
    tstamp: str
    filename: str
    mode: str = "record"
    status: str = "ok"
    replay: dict | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.projid, self.tstamp, self.filename)


@dataclass
class Logfile:
    header: RunHeader
    records: list = field(default_factory=list)

    def log_records(self) -> list[LogRecord]:
        return [r for r in self.records if isinstance(r, LogRecord)]


# ---------------------------------------------------------------------------
# logfile I/O


def write_logfile(path: Path | str, header: RunHeader, records: Sequence) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = {
        "flor_schema": SCHEMA_VERSION,
        "projid": header.projid,
        "tstamp": header.tstamp,
        "filename": header.filename,
        "mode": header.mode,
        "status": header.status,
    }
    if header.replay is not None:
        head["replay"] = header.replay
    lines = ["{"]
    for k, v in head.items():
        lines.append(f"  {json.dumps(k)}: {json.dumps(v, sort_keys=True)},")
    lines.append('  "records": [')
    body = [json.dumps(r.encode(), ensure_ascii=False) for r in records]
    lines.extend(f"    {b}," for b in body[:-1])
    if body:
        lines.append(f"    {body[-1]}")
    lines.append("  ]")
    lines.append("}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _record_line(text: str, index: int) -> int | None:
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.strip().startswith('"records"'):
            return i + 2 + index
    return None


def _check_loop(obj: Any, where: str, errors: list[str], depth: int = 0) -> None:
    if not isinstance(obj, dict):
        errors.append(f"{where}: loop context must be an object")
        return
    if depth > 256:
        errors.append(f"{where}: loop context nests too deeply")
        return
    if not isinstance(obj.get("name"), str) or not obj.get("name"):
        errors.append(f"{where}: loop context needs a non-empty name")
    it = obj.get("iteration")
    if not isinstance(it, int) or isinstance(it, bool) or it < 0:
        errors.append(f"{where}: loop iteration must be a non-negative integer")
    if not isinstance(obj.get("ctx_id"), int):
        errors.append(f"{where}: loop ctx_id must be an integer")
    entries = obj.get("entries")
    if entries is not None and (not isinstance(entries, int) or entries < 0):
        errors.append(f"{where}: loop entries must be a non-negative integer or null")
    if obj.get("parent") is not None:
        _check_loop(obj["parent"], where, errors, depth + 1)


def read_logfile(path: Path | str) -> Logfile:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedLogfile(f"{path}: line {e.lineno} col {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise MalformedLogfile(f"{path}: top level must be an object")
    errors: list[str] = []
    if doc.get("flor_schema") != SCHEMA_VERSION:
        errors.append(f"unsupported flor_schema {doc.get('flor_schema')!r}")
    for k in DIMENSIONS:
        if not isinstance(doc.get(k), str) or not doc.get(k):
            errors.append(f"header field {k!r} missing or not text")
    if doc.get("mode") not in ("record", "replay"):
        errors.append(f"header mode must be record or replay, got {doc.get('mode')!r}")
    raw = doc.get("records")
    if not isinstance(raw, list):
        errors.append("records must be a list")
        raw = []

    frames: dict[int, LoopFrame] = {}

    def frame_of(obj: dict | None) -> LoopFrame | None:
        if obj is None:
            return None
        cid = obj["ctx_id"]
        f = frames.get(cid)
        if f is None:
            f = LoopFrame(cid, obj["name"], obj["iteration"], obj.get("entries"), frame_of(obj.get("parent")))
            frames[cid] = f
        elif obj.get("entries") is not None:
            f.loop_entries = obj["entries"]
        return f

    records: list = []
    for i, rec in enumerate(raw):
        line = _record_line(text, i)
        where = f"record {i}" + (f" (line {line})" if line else "")
        before = len(errors)
        if not isinstance(rec, dict):
            errors.append(f"{where}: record must be an object")
            continue
        kind = rec.get("kind")
        if kind == "log":
            if not isinstance(rec.get("value_name"), str) or not rec.get("value_name"):
                errors.append(f"{where}: value_name must be non-empty text")
            if not isinstance(rec.get("value"), str):
                errors.append(f"{where}: value must be text")
            if rec.get("value_type") not in VALUE_TYPES:
                errors.append(f"{where}: value_type must be one of {VALUE_TYPES}")
            if rec.get("loop") is not None:
                _check_loop(rec["loop"], where, errors)
            if len(errors) == before:
                records.append(
                    LogRecord(rec["value_name"], rec["value"], rec["value_type"], frame_of(rec.get("loop")))
                )
        elif kind == "loop":
            _check_loop(rec.get("loop"), where, errors)
            if len(errors) == before:
                records.append(LoopEvent(frame_of(rec["loop"])))
        else:
            errors.append(f"{where}: unknown record kind {kind!r}")
    if errors:
        raise MalformedLogfile(f"{path}: rejected, {len(errors)} problem(s):\n  " + "\n  ".join(errors))
    header = RunHeader(doc["projid"], doc["tstamp"], doc["filename"], doc["mode"], doc.get("status", "ok"), doc.get("replay"))
    return Logfile(header, records)


# ---------------------------------------------------------------------------
# unpack / backfill


@dataclass
class UnpackResult:
    logs: int = 0
    loops: int = 0
    skipped: bool = False


def _next_ctx_id(db: Database) -> int:
    return db.query("SELECT COALESCE(MAX(ctx_id), 0) + 1 AS n FROM loops")[0]["n"]


class _LoopIndex:
    """Existing ``loops`` rows of one run, addressed by (parent, name, iteration)."""

    def __init__(self, db: Database, key: tuple[str, str, str]):
        self.db = db
        self.key = key
        self.by_path: dict[tuple[int | None, str, int], int] = {}
        rows = db.query(
            "SELECT ctx_id, parent_ctx_id, loop_name, loop_iteration FROM loops WHERE projid=? AND tstamp=?",
            key[:2],
        )
        for r in rows:
            self.by_path[(r["parent_ctx_id"], r["loop_name"], r["loop_iteration"])] = r["ctx_id"]
        self.next_id = _next_ctx_id(db)
        self.inserted = 0

    def resolve(self, frame: LoopFrame) -> int:
        parent = self.resolve(frame.parent) if frame.parent is not None else None
        k = (parent, frame.loop_name, frame.loop_iteration)
        cid = self.by_path.get(k)
        if cid is None:
            cid = self.next_id
            self.next_id += 1
            self.db.execute(
                "INSERT INTO loops (ctx_id, parent_ctx_id, loop_name, loop_entries, loop_iteration, projid, tstamp, filename)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (cid, parent, frame.loop_name, frame.loop_entries, frame.loop_iteration, *self.key),
            )
            self.by_path[k] = cid
            self.inserted += 1
        return cid


def unpack(path: Path | str, db: Database) -> UnpackResult:
    """Insert a recorded run's logfile into ``logs`` and ``loops``.

    All-or-nothing; a run already present (same projid and tstamp) is left
    untouched.
    """
    lf = read_logfile(path)
    h = lf.header
    if h.mode != "record":
        raise FlorError(f"{path} is a replay logfile; use backfill")
    if db.query("SELECT 1 FROM runs WHERE projid=? AND tstamp=?", (h.projid, h.tstamp)):
        log.info("run %s %s already unpacked; skipping", h.projid, h.tstamp)
        return UnpackResult(skipped=True)
    res = UnpackResult()
    with db.transaction():
        db.execute(
            "INSERT INTO runs (projid, tstamp, filename, status, logfile) VALUES (?, ?, ?, ?, ?)",
            (h.projid, h.tstamp, h.filename, h.status, str(path)),
        )
        idx = _LoopIndex(db, h.key)
        rows = []
        for rec in lf.records:
            if isinstance(rec, LoopEvent):
                idx.resolve(rec.frame)
                continue
            cid = idx.resolve(rec.frame) if rec.frame is not None else None
            rows.append((*h.key, cid, rec.value_name, rec.value, rec.value_type))
        db.conn.executemany(
            "INSERT INTO logs (projid, tstamp, filename, ctx_id, value_name, value, value_type)"
            " VALUES (?, ?, ?, ?, ?, ?, ?)",
            rows,
        )
        res.logs = len(rows)
        res.loops = idx.inserted
    return res


def backfill(path: Path | str, db: Database, targets: Sequence[str] | None = None) -> int:
    """Merge a replay logfile into its original run; returns rows inserted.

    Only values named in ``targets`` (default: the replay's own target list)
    are considered, plus measured checkpoint-load timings. A cell that
    already holds values is left alone if the replay agrees with it and is a
    :class:`BackfillConflict` otherwise.
    """
    lf = read_logfile(path)
    h = lf.header
    if h.mode != "replay":
        raise FlorError(f"{path} is not a replay logfile")
    if targets is None:
        targets = (h.replay or {}).get("vars") or []
    targets = set(targets)
    if not db.query("SELECT 1 FROM runs WHERE projid=? AND tstamp=?", (h.projid, h.tstamp)):
        raise FlorError(f"replay of unknown run {h.projid} {h.tstamp}")
    filename = db.query("SELECT filename FROM runs WHERE projid=? AND tstamp=?", (h.projid, h.tstamp))[0][
        "filename"
    ]
    key = (h.projid, h.tstamp, filename)

    cells: dict[tuple, list[LogRecord]] = {}
    for rec in lf.log_records():
        if rec.value_name in targets or rec.value_name == T_CKPT_LOAD:
            path_ = rec.frame.path() if rec.frame is not None else ()
            cells.setdefault((path_, rec.value_name), []).append(rec)
    if not cells:
        return 0

    inserted = 0
    with db.transaction():
        idx = _LoopIndex(db, key)
        for (_, name), recs in cells.items():
            frame = recs[0].frame
            cid = idx.resolve(frame) if frame is not None else None
            existing = db.query(
                "SELECT value FROM logs WHERE projid=? AND tstamp=? AND value_name=? AND ctx_id IS ?",
                (h.projid, h.tstamp, name, cid),
            )
            new_vals = [r.value for r in recs]
            if existing:
                old_vals = [r["value"] for r in existing]
                if name != T_CKPT_LOAD and sorted(old_vals) != sorted(new_vals):
                    where = "/".join(f"{n}={i}" for n, i in (frame.path() if frame else ())) or "top level"
                    raise BackfillConflict(
                        f"nondeterministic replay: {name!r} at {where} of run {h.tstamp} "
                        f"was {old_vals!r}, replay produced {new_vals!r}"
                    )
                continue
            db.conn.executemany(
                "INSERT INTO logs (projid, tstamp, filename, ctx_id, value_name, value, value_type)"
                " VALUES (?, ?, ?, ?, ?, ?, ?)",
                [(*key, cid, r.value_name, r.value, r.value_type) for r in recs],
            )
            if name in targets:
                inserted += len(recs)
    return inserted


def float_or_none(text: str | None) -> float | None:
    if text is None:
        return None
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None
