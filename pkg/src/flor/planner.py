"""Replay planning: which versions, which scan level, and what it will cost.

The scan level comes from where the target ``log`` calls sit relative to
the outermost named loop (static analysis, following calls into helper
functions). Costs come from the profile records a run wrote while it was
recorded, plus checkpoint-load timings measured by earlier replays.
"""

from __future__ import annotations

import ast
import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import logstore as ls
from .astutil import FlorNames, api_calls, enclosing_stmt, loop_name_of, parents, scope_of
from .ckptstore import CheckpointStore, calibrate
from .errors import FlorError, PredicateError, ProfileMissing, UnalignableVersion, VersionNotFound
from .project import Project
from .scan import DEPTH, PREFIX, RANGE, SUFFIX, VALIDATION, ScanLevel, partition_iterations

log = logging.getLogger(__name__)

CALIBRATION_FILE = "calibration.json"


# ---------------------------------------------------------------------------
# static scan classification


class _Analysis:
    def __init__(self, source: str, main_loop: str | None = None):
        self.tree = ast.parse(source)
        self.names = FlorNames.scan(self.tree)
        self.parent = parents(self.tree)
        self.funcs: dict[str, list[ast.AST]] = {}
        for n in ast.walk(self.tree):
            if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef)):
                self.funcs.setdefault(n.name, []).append(n)
        self.loops = sorted(
            (n for n in ast.walk(self.tree) if loop_name_of(n, self.names)),
            key=lambda n: (n.lineno, n.col_offset),
        )
        self.main = self._find_main(main_loop)
        self.anchors: dict[ast.AST, ast.stmt] = {}
        if self.main is not None:
            self._chain_anchors()

    def _call_sites(self, fn: ast.AST) -> list[ast.Call]:
        name = getattr(fn, "name", None)
        if name is None:
            return []
        out = []
        for n in ast.walk(self.tree):
            if isinstance(n, ast.Call):
                f = n.func
                if (isinstance(f, ast.Name) and f.id == name) or (isinstance(f, ast.Attribute) and f.attr == name):
                    out.append(n)
        return sorted(out, key=lambda c: (c.lineno, c.col_offset))

    def _loop_ancestors(self, node: ast.AST) -> list[ast.AST]:
        """Named-loop statements lexically enclosing ``node`` in its own scope."""
        out = []
        p = self.parent.get(node)
        while p is not None and not isinstance(p, (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda)):
            if loop_name_of(p, self.names):
                out.append(p)
            p = self.parent.get(p)
        return out

    def _inside_loop(self, node: ast.AST, seen: set | None = None) -> bool:
        if self._loop_ancestors(node):
            return True
        scope = scope_of(node, self.parent)
        if isinstance(scope, ast.Module):
            return False
        seen = seen or set()
        if scope in seen:
            return False
        seen.add(scope)
        return any(self._inside_loop(c, seen) for c in self._call_sites(scope))

    def _find_main(self, hint: str | None) -> ast.AST | None:
        cands = [n for n in self.loops if not self._inside_loop(n)]
        if hint is not None:
            named = [n for n in cands if loop_name_of(n, self.names) == hint]
            cands = named or cands
        return cands[0] if cands else None

    def _chain_anchors(self) -> None:
        node: ast.AST = self.main
        seen = set()
        while True:
            scope = scope_of(node, self.parent)
            self.anchors.setdefault(scope, node)
            if isinstance(scope, ast.Module) or scope in seen:
                return
            seen.add(scope)
            sites = self._call_sites(scope)
            if not sites:
                return
            node = enclosing_stmt(sites[0], self.parent)

    def position(self, node: ast.AST, seen: frozenset = frozenset()) -> str:
        inner = self._loop_ancestors(node)
        if self.main is not None and self.main in inner:
            depth = inner.index(self.main) + 1
            return VALIDATION if depth == 1 else RANGE
        if self.main is None:
            return PREFIX
        scope = scope_of(node, self.parent)
        anchor = self.anchors.get(scope)
        if anchor is not None:
            if node.lineno > anchor.end_lineno:
                return SUFFIX
            return PREFIX
        if scope in seen:
            return RANGE
        sites = self._call_sites(scope)
        if not sites:
            # never called from analyzable code: assume the worst
            return RANGE
        best = PREFIX
        for site in sites:
            p = self.position(site, seen | {scope})
            if inner and p == VALIDATION:
                p = RANGE
            if DEPTH[p] > DEPTH[best]:
                best = p
        return best


def log_sites(source: str, var: str) -> list[ast.Call]:
    tree = ast.parse(source)
    return [c for c, name in api_calls(tree, FlorNames.scan(tree), "log") if name == var]


def classify_scan(
    source: str, vars: list[str], entries: int | None = None, main_loop: str | None = None
) -> ScanLevel:
    """Shallowest scan level whose executed region reaches every ``log(var)``."""
    if not vars:
        raise FlorError("no variables to classify")
    an = _Analysis(source, main_loop)
    sites = {c: name for c, name in api_calls(an.tree, an.names, "log")}
    best = None
    for var in vars:
        calls = [c for c, name in sites.items() if name == var]
        if not calls:
            raise FlorError(f"variable not logged in this version: {var!r}")
        for c in calls:
            kind = an.position(c)
            if best is None or DEPTH[kind] > DEPTH[best]:
                best = kind
    if best == RANGE:
        if entries is None:
            raise FlorError("a range scan needs the outer loop's entry count")
        return ScanLevel(RANGE, 0, entries)
    return ScanLevel(best)


def main_loop_name(source: str) -> str | None:
    an = _Analysis(source)
    return loop_name_of(an.main, an.names) if an.main is not None else None


# ---------------------------------------------------------------------------
# profiles and estimates


@dataclass
class RunProfile:
    projid: str
    tstamp: str
    filename: str
    main_loop: str | None
    entries: int | None
    t_prefix: float
    t_suffix: float
    t_iter: dict[int, float] = field(default_factory=dict)
    t_nested: dict[int, float] = field(default_factory=dict)
    t_save: dict[int, float] = field(default_factory=dict)
    t_load: dict[int, float] = field(default_factory=dict)
    checkpoints: list[int] = field(default_factory=list)

    @property
    def run(self) -> tuple[str, str, str]:
        return (self.projid, self.tstamp, self.filename)

    @property
    def n_iter(self) -> int:
        return self.entries if self.entries is not None else len(self.t_iter)


def load_profile(db: ls.Database, projid: str, tstamp: str, store: CheckpointStore | None = None) -> RunProfile:
    run = db.query("SELECT filename FROM runs WHERE projid=? AND tstamp=?", (projid, tstamp))
    if not run:
        raise FlorError(f"no recorded run {projid} {tstamp}")
    filename = run[0]["filename"]
    top = db.query(
        "SELECT loop_name, loop_entries FROM loops WHERE projid=? AND tstamp=? AND parent_ctx_id IS NULL"
        " ORDER BY ctx_id LIMIT 1",
        (projid, tstamp),
    )
    main = top[0]["loop_name"] if top else None
    entries = top[0]["loop_entries"] if top else None
    rows = db.query(
        "SELECT l.value_name, l.value, p.loop_name, p.loop_iteration, p.parent_ctx_id"
        " FROM logs l LEFT JOIN loops p ON l.ctx_id = p.ctx_id"
        " WHERE l.projid=? AND l.tstamp=? AND l.value_type=?",
        (projid, tstamp, ls.PROFILE),
    )
    prof = RunProfile(projid, tstamp, filename, main, entries, -1.0, -1.0)
    for r in rows:
        v = ls.float_or_none(r["value"])
        if v is None:
            continue
        name = r["value_name"]
        if r["loop_name"] is None:
            if name == ls.T_PREFIX:
                prof.t_prefix = v
            elif name == ls.T_SUFFIX:
                prof.t_suffix = v
            continue
        if r["loop_name"] != main or r["parent_ctx_id"] is not None:
            continue
        k = r["loop_iteration"]
        if name == ls.T_CKPT_SAVE:
            prof.t_save[k] = v
        elif name == ls.T_CKPT_LOAD:
            prof.t_load.setdefault(k, v)
        elif name == ls.PROFILE_PREFIX + main:
            prof.t_iter[k] = v
        else:
            prof.t_nested[k] = prof.t_nested.get(k, 0.0) + v
    if prof.t_prefix < 0 or prof.t_suffix < 0:
        raise ProfileMissing(f"run {tstamp} has no profile records; re-record it to enable estimates")
    if store is not None:
        prof.checkpoints = store.iterations(prof.run)
    else:
        prof.checkpoints = sorted(prof.t_save)
    return prof


def calibration_factor(project: Project, refresh: bool = False) -> float:
    """Checkpoint load/save time ratio on this machine, cached in ``.flor/``."""
    path = project.meta / CALIBRATION_FILE
    if path.exists() and not refresh:
        try:
            return float(json.loads(path.read_text())["factor"])
        except (ValueError, KeyError):
            pass
    factor = calibrate(project.obj_dir)
    path.write_text(json.dumps({"factor": factor}))
    return factor


class CostModel:
    def __init__(self, profile: RunProfile, factor: float = 1.0):
        self.p = profile
        self.factor = factor

    def load(self, k: int) -> float:
        if k in self.p.t_load:
            return self.p.t_load[k]
        saves = self.p.t_save
        save = saves[k] if k in saves else (sum(saves.values()) / len(saves) if saves else 0.0)
        return save * self.factor

    def _iters(self, lo: int, hi: int) -> float:
        return sum(self.p.t_iter.get(k, 0.0) for k in range(lo, hi))

    def _full(self) -> float:
        return self.p.t_prefix + self._iters(0, self.p.n_iter) + self.p.t_suffix

    def estimate(self, scan: ScanLevel) -> float:
        p = self.p
        E = p.n_iter
        if scan.kind == PREFIX or p.main_loop is None:
            return p.t_prefix if scan.kind == PREFIX else p.t_prefix + p.t_suffix
        ck = p.checkpoints
        if scan.kind == SUFFIX:
            return min(self._restored(), self._range_cost(0, E, None))
        if scan.kind == VALIDATION:
            return min(self._stepped(), self._range_cost(0, E, None))
        return self._range_cost(scan.lo, min(scan.hi, E) if E else scan.hi, scan.partition)

    def _restored(self) -> float:
        """Suffix by restoring the last checkpoint."""
        p = self.p
        if not p.checkpoints:
            return self._full()
        c = p.checkpoints[-1]
        return p.t_prefix + self.load(c) + self._iters(c + 1, p.n_iter) + p.t_suffix

    def _stepped(self) -> float:
        """Validation by restoring each epoch's checkpoint and skipping nested loops."""
        p = self.p
        E = p.n_iter
        ck = p.checkpoints
        if not ck:
            return self._full()
        have = set(ck)
        total = p.t_prefix + p.t_suffix
        for e in range(E):
            it = p.t_iter.get(e, 0.0)
            if e in have:
                total += self.load(e) + max(0.0, it - p.t_nested.get(e, 0.0))
            else:
                total += it
        return total

    def _range_cost(self, lo: int, hi: int, partition: tuple[int, int] | None) -> float:
        p = self.p
        E = p.n_iter
        ck = p.checkpoints
        if partition is not None:
            i, n = partition
            parts = partition_iterations(lo, hi, n, ck)
            if i >= len(parts):
                return p.t_prefix
            resume, _, stop = parts[i]
        else:
            below = [c for c in ck if c < lo]
            resume, stop = (below[-1] if below else -1), hi
        total = p.t_prefix + (self.load(resume) if resume >= 0 else 0.0) + self._iters(resume + 1, stop)
        # a range that stops short of the end exits before the post-loop code
        if stop >= E:
            total += p.t_suffix
        return total

    def cheapest(self, scan: ScanLevel) -> ScanLevel:
        """``scan``, or a full range scan when re-running every epoch is cheaper.

        Restoring checkpoints loses to plain re-execution when loading state
        costs more than the loop work it lets us skip.
        """
        if self.p.main_loop is None or not self.p.n_iter:
            return scan
        full = self._range_cost(0, self.p.n_iter, None)
        if (scan.kind == SUFFIX and full < self._restored()) or (scan.kind == VALIDATION and full < self._stepped()):
            return ScanLevel(RANGE, 0, self.p.n_iter)
        return scan

    def estimate_partitioned(self, scan: ScanLevel, n: int) -> float:
        if scan.kind != RANGE or n <= 1:
            return self.estimate(scan)
        return max(self.estimate(scan.with_partition(i, n)) for i in range(n))


def lpt_makespan(costs: list[float], workers: int) -> float:
    """Longest-processing-time-first schedule length on ``workers`` machines."""
    if workers < 1:
        raise ValueError("workers must be positive")
    loads = [0.0] * min(workers, max(1, len(costs)))
    heapq.heapify(loads)
    for c in sorted(costs, reverse=True):
        heapq.heappush(loads, heapq.heappop(loads) + c)
    return max(loads) if costs else 0.0


# ---------------------------------------------------------------------------
# plans


@dataclass
class ReplayQuery:
    vars: list[str]
    where_clause: str | None = None

    def __post_init__(self) -> None:
        self.vars = [v.strip() for v in self.vars if v and v.strip()]
        if not self.vars:
            raise FlorError("replay needs at least one variable")


@dataclass
class ReplayTask:
    vid: str
    tstamp: str
    filename: str
    scan: ScanLevel
    estimate: float
    source: str
    inserted: list[str] = field(default_factory=list)
    args: dict[str, str] = field(default_factory=dict)
    entries: int | None = None
    partitions: int = 1


@dataclass
class ReplayPlan:
    vars: list[str]
    where_clause: str | None
    tasks: list[ReplayTask] = field(default_factory=list)
    excluded: list[tuple[str, str, str]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    confirmed: bool = False

    @property
    def total_serial(self) -> float:
        return sum(t.estimate for t in self.tasks)

    def total_parallel(self, n: int) -> float:
        return lpt_makespan([t.estimate for t in self.tasks], n)

    def render(self, workers: int = 1) -> str:
        lines = [f"{t.vid[:8]}  {t.tstamp}  {t.scan}  {t.estimate:.2f}" for t in self.tasks]
        for vid, tstamp, why in self.excluded:
            lines.append(f"{vid[:8]}  {tstamp}  excluded: {why}")
        lines.extend(self.notes)
        lines.append(f"total serial {self.total_serial:.2f}s / parallel({workers}) {self.total_parallel(workers):.2f}s")
        return "\n".join(lines)


def _run_args(db: ls.Database, projid: str, tstamp: str) -> dict[str, str]:
    rows = db.query(
        "SELECT value_name, value FROM logs WHERE projid=? AND tstamp=? AND value_type=? ORDER BY rowid",
        (projid, tstamp, ls.HYPERPARAM),
    )
    return {r["value_name"]: r["value"] for r in rows}


def select_runs(db: ls.Database, projid: str, vars: list[str], where: str | None):
    """Runs matching ``where``, plus the outer-loop iterations it admits (or None)."""
    import pandas as pd

    from . import views

    pred = views.parse_predicate(where)
    used = pred.columns
    for v in vars:
        if v in used:
            raise PredicateError(f"the where clause references {v!r}, which this replay is generating")
    loop_names = {r[0] for r in db.query("SELECT DISTINCT loop_name FROM loops WHERE projid=?", (projid,))}
    outer = {
        r[0] for r in db.query("SELECT DISTINCT loop_name FROM loops WHERE projid=? AND parent_ctx_id IS NULL", (projid,))
    }
    value_cols = [c for c in used if c not in ls.DIMENSIONS and c not in loop_names]
    for c in value_cols:
        if not db.query("SELECT 1 FROM logs WHERE projid=? AND value_name=? LIMIT 1", (projid, c)):
            raise PredicateError(f"column {c!r} has no materialized values; replay it first")
    if value_cols:
        frame = views.dataframe(db, *value_cols, projid=projid)
    else:
        rows = db.query("SELECT projid, tstamp, filename FROM runs WHERE projid=? ORDER BY tstamp", (projid,))
        frame = pd.DataFrame([tuple(r) for r in rows], columns=list(ls.DIMENSIONS))
    narrowing = [c for c in used if c in outer]
    for c in narrowing:
        if c not in frame.columns:
            its = db.query(
                "SELECT projid, tstamp, loop_iteration FROM loops WHERE projid=? AND loop_name=? AND parent_ctx_id IS NULL",
                (projid, c),
            )
            it_df = pd.DataFrame([tuple(r) for r in its], columns=["projid", "tstamp", c])
            frame = frame.merge(it_df, on=["projid", "tstamp"], how="left")
    matched = views.filter_view(frame, pred)
    out: dict[str, tuple[str, tuple[int, int] | None]] = {}
    for _, row in matched.iterrows():
        ts = row["tstamp"]
        span = None
        if narrowing:
            k = row[narrowing[0]]
            if k is None or k is pd.NA or k != k:
                continue
            k = int(k)
            prev = out.get(ts, (row["filename"], None))[1]
            span = (k, k + 1) if prev is None else (min(prev[0], k), max(prev[1], k + 1))
        out[ts] = (row["filename"], span)
    return out


def plan(
    project: Project,
    query: ReplayQuery,
    db: ls.Database | None = None,
    source_y: str | None = None,
    partitions: int = 1,
) -> ReplayPlan:
    """Build (but do not confirm) the replay schedule for ``query``."""
    from . import propagate, vcs

    own = db is None
    db = db or ls.Database(project.db_path)
    try:
        result = ReplayPlan(list(query.vars), query.where_clause)
        matched = select_runs(db, project.projid, result.vars, query.where_clause)
        if not matched:
            return result
        store = CheckpointStore.local(project.obj_dir, read_only=True)
        factor = None
        y_cache: dict[str, str | None] = {}
        for tstamp in sorted(matched):
            filename, span = matched[tstamp]
            have = {
                r[0]
                for r in db.query(
                    "SELECT DISTINCT value_name FROM logs WHERE projid=? AND tstamp=?", (project.projid, tstamp)
                )
            }
            if all(v in have for v in result.vars):
                continue
            try:
                vid = vcs.lookup(db, project.projid, tstamp)
                src_x = vcs.show(project, vid, filename)
            except VersionNotFound as e:
                result.excluded.append(("-" * 8, tstamp, str(e)))
                continue
            if filename not in y_cache:
                y_path = project.root / filename
                y_cache[filename] = source_y if source_y is not None else (
                    y_path.read_text(encoding="utf-8") if y_path.exists() else None
                )
            src_y = y_cache[filename]
            missing = [v for v in result.vars if not log_sites(src_x, v)]
            inserted: list[str] = []
            src = src_x
            if missing:
                if src_y is None:
                    result.excluded.append((vid, tstamp, f"no newer source of {filename} to propagate from"))
                    continue
                try:
                    prop = propagate.propagate(src_x, src_y, missing)
                except (UnalignableVersion, FlorError) as e:
                    result.excluded.append((vid, tstamp, str(e)))
                    continue
                src, inserted = prop.source, prop.inserted
                result.notes.extend(f"{vid[:8]}  note: {n}" for n in prop.notes)
            try:
                profile = load_profile(db, project.projid, tstamp, store)
            except ProfileMissing as e:
                result.excluded.append((vid, tstamp, str(e)))
                continue
            scan = classify_scan(src, result.vars, profile.n_iter or None, profile.main_loop)
            if scan.kind == RANGE and span is not None:
                lo, hi = max(span[0], 0), min(span[1], scan.hi)
                if lo < hi:
                    scan = ScanLevel(RANGE, lo, hi)
            if factor is None:
                factor = calibration_factor(project)
            model = CostModel(profile, factor)
            scan = model.cheapest(scan)
            n = partitions if scan.kind == RANGE else 1
            result.tasks.append(
                ReplayTask(
                    vid, tstamp, filename, scan, model.estimate_partitioned(scan, n), src, inserted,
                    _run_args(db, project.projid, tstamp), profile.entries, n,
                )
            )
        return result
    finally:
        if own:
            db.close()
