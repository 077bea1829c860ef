"""Pivoted views over ``logs`` and ``loops``, and the where-clause language.

``dataframe(db, "loss", "acc")`` returns one wide table: the run dimensions,
one integer column per loop name (holding that loop's iteration), then one
text column per requested name. Each name is unrolled on its own by
repeatedly joining its rows with ``loops`` and climbing ``parent_ctx_id``
until every row reaches the top level; the per-name tables are then outer
joined, deepest first, on whatever columns they share.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

import pandas as pd

from .errors import FlorError, PredicateError, UnknownColumn
from .logstore import DIMENSIONS, Database

log = logging.getLogger(__name__)

_MAX_DEPTH = 1024


# ---------------------------------------------------------------------------
# pivot


def _loops_frame(db: Database, projid: str | None) -> pd.DataFrame:
    sql = "SELECT ctx_id, parent_ctx_id, loop_name, loop_iteration FROM loops"
    params: tuple = ()
    if projid is not None:
        sql += " WHERE projid = ?"
        params = (projid,)
    rows = db.query(sql, params)
    return pd.DataFrame(
        [tuple(r) for r in rows], columns=["ctx_id", "parent_ctx_id", "loop_name", "loop_iteration"]
    ).astype({"ctx_id": "Int64", "parent_ctx_id": "Int64", "loop_iteration": "Int64"})


def _loop_order(loops: pd.DataFrame) -> list[str]:
    """Loop names ordered outermost first (by shallowest nesting depth seen)."""
    parent = dict(zip(loops["ctx_id"].tolist(), loops["parent_ctx_id"].tolist()))
    depth: dict[int, int] = {}

    def depth_of(cid: int) -> int:
        chain = []
        while cid not in depth:
            p = parent.get(cid)
            chain.append(cid)
            if p is None or p is pd.NA:
                depth[cid] = 0
                chain.pop()
                break
            cid = p
            if len(chain) > _MAX_DEPTH:
                raise FlorError("loops table has a cyclic parent chain")
        d = depth[cid]
        for c in reversed(chain):
            d += 1
            depth[c] = d
        return depth[chain[0]] if chain else d

    best: dict[str, tuple[int, int]] = {}
    for pos, (cid, name) in enumerate(zip(loops["ctx_id"].tolist(), loops["loop_name"].tolist())):
        d = depth_of(cid)
        if name not in best or d < best[name][0]:
            best[name] = (d, best.get(name, (d, pos))[1])
    return sorted(best, key=lambda n: best[n])


def _unroll(rows: pd.DataFrame, loops: pd.DataFrame) -> tuple[pd.DataFrame, list[str]]:
    """Fixpoint: replace ``ctx_id`` by one iteration column per loop level."""
    seen: list[str] = []
    df = rows.copy()
    for _ in range(_MAX_DEPTH):
        pending = df["ctx_id"].notna()
        if not pending.any():
            return df.drop(columns=["ctx_id"]), seen
        step = df.merge(loops, on="ctx_id", how="left")
        if step.loc[pending.values, "loop_name"].isna().any():
            raise FlorError("logs reference a ctx_id with no loops row")
        for name in step["loop_name"].dropna().unique():
            if name not in df.columns:
                df[name] = pd.array([pd.NA] * len(df), dtype="Int64")
                seen.append(name)
            hit = (step["loop_name"] == name).fillna(False).values
            if df.loc[hit, name].notna().any():
                raise FlorError(f"loop {name!r} appears twice in one ctx chain")
            df.loc[hit, name] = step.loc[hit, "loop_iteration"].values
        df["ctx_id"] = step["parent_ctx_id"].values
    raise FlorError("loop nesting exceeds the supported depth")


def dataframe(db: Database, *names: str, projid: str | None = None) -> pd.DataFrame:
    """The pivoted view for ``names`` (see module docstring)."""
    if not names:
        raise FlorError("dataframe needs at least one name")
    names = tuple(dict.fromkeys(names))
    for n in names:
        if n in DIMENSIONS:
            raise FlorError(f"{n!r} is a dimension column, not a logged name")

    loops = _loops_frame(db, projid)
    loop_names = set(loops["loop_name"].tolist())
    clash = [n for n in names if n in loop_names]
    if clash:
        raise FlorError(
            f"name {clash[0]!r} is both a loop name and a logged value; the view would be ambiguous"
        )

    where = "" if projid is None else " AND projid = ?"
    extra = () if projid is None else (projid,)
    per_name: list[pd.DataFrame] = []
    used_loops: set[str] = set()
    for n in names:
        rows = db.query(
            "SELECT projid, tstamp, filename, ctx_id, value FROM logs WHERE value_name = ?" + where
            + " ORDER BY rowid",
            (n, *extra),
        )
        df = pd.DataFrame([tuple(r) for r in rows], columns=[*DIMENSIONS, "ctx_id", n])
        df["ctx_id"] = df["ctx_id"].astype("Int64")
        df[n] = df[n].astype(object)
        df, seen = _unroll(df, loops)
        used_loops.update(seen)
        per_name.append(df)

    # deepest tables first, so a shallower value spreads over every deeper row
    # instead of stranding on a row whose loop coordinates are null
    depth = [len(df.columns) - len(DIMENSIONS) - 1 for df in per_name]
    per_name = [per_name[i] for i in sorted(range(len(per_name)), key=lambda i: -depth[i])]
    out = per_name[0]
    for df in per_name[1:]:
        on = [c for c in out.columns if c in df.columns]
        left_only = [c for c in out.columns if c not in on]
        right_only = [c for c in df.columns if c not in on]
        out = _outer_join(out, df, on)
        out = out[[*on, *left_only, *right_only]]

    runs = db.query(
        "SELECT projid, tstamp, filename FROM runs" + ("" if projid is None else " WHERE projid = ?"), extra
    )
    runs_df = pd.DataFrame([tuple(r) for r in runs], columns=list(DIMENSIONS))
    present = set(map(tuple, out[list(DIMENSIONS)].itertuples(index=False, name=None)))
    missing = runs_df[[t not in present for t in runs_df.itertuples(index=False, name=None)]]
    if len(missing):
        out = pd.concat([out, missing], ignore_index=True)

    loop_cols = [n for n in _loop_order(loops) if n in used_loops]
    cols = [*DIMENSIONS, *loop_cols, *names]
    for c in loop_cols:
        if c not in out.columns:
            out[c] = pd.NA
        out[c] = out[c].astype("Int64")
    for n in names:
        out[n] = out[n].astype(object).where(out[n].notna(), None)
    out = out[cols]
    out = out.sort_values([*DIMENSIONS[:2], *loop_cols], na_position="first", kind="mergesort")
    return out.reset_index(drop=True)


def _outer_join(left: pd.DataFrame, right: pd.DataFrame, on: list[str]) -> pd.DataFrame:
    """Outer join on ``on``; a null loop coordinate matches every iteration.

    Dimensions must agree exactly. A row whose shared loop column is null
    holds a value that is not scoped to that loop (logged above it, or at a
    different depth in that run), so it pairs with every row of the run.
    """
    keys = [c for c in on if c not in DIMENSIONS]
    dims = [c for c in on if c in DIMENSIONS]
    if not keys:
        if not dims:
            return left.merge(right, how="cross")
        return left.merge(right, on=dims, how="outer", sort=False)
    left = left.reset_index(drop=True)
    right = right.reset_index(drop=True)
    lfull = left[keys].notna().all(axis=1)
    rfull = right[keys].notna().all(axis=1)
    li, ri = "__l", "__r"
    L = left.assign(**{li: range(len(left))})
    R = right.assign(**{ri: range(len(right))})

    pieces = [L[lfull.values].merge(R[rfull.values], on=on, how="inner", sort=False)]
    # pairs where either side has a null coordinate: match on dims, then test keys
    for lmask, rmask in ((~lfull.values, slice(None)), (lfull.values, ~rfull.values)):
        lsub, rsub = L[lmask], R[rmask]
        if lsub.empty or rsub.empty:
            continue
        cand = lsub.merge(rsub, on=dims, how="inner", suffixes=("", "__rk"), sort=False) if dims else lsub.merge(
            rsub, how="cross", suffixes=("", "__rk")
        )
        ok = pd.Series(True, index=cand.index)
        for k in keys:
            a, b = cand[k], cand[k + "__rk"]
            ok &= a.isna() | b.isna() | (a == b).fillna(False)
        cand = cand[ok.values].copy()
        for k in keys:
            cand[k] = cand[k].where(cand[k].notna(), cand[k + "__rk"])
        pieces.append(cand.drop(columns=[k + "__rk" for k in keys]))
    matched = pd.concat(pieces, ignore_index=True) if pieces else pd.DataFrame()
    used_l = set(matched[li].tolist()) if len(matched) else set()
    used_r = set(matched[ri].tolist()) if len(matched) else set()
    rest_l = L[[i not in used_l for i in range(len(L))]]
    rest_r = R[[i not in used_r for i in range(len(R))]]
    out = pd.concat([matched, rest_l, rest_r], ignore_index=True)
    return out.drop(columns=[li, ri])


def to_csv(view: pd.DataFrame, path) -> None:
    """RFC-4180 CSV: header row, CRLF line ends, minimal quoting, null as empty."""
    view.to_csv(path, index=False, lineterminator="\r\n")


# ---------------------------------------------------------------------------
# where clauses
#
#   expr  := term ('or' term)*
#   term  := atom ('and' atom)*
#   atom  := '(' expr ')' | column op literal

OPS = ("<=", ">=", "!=", "=", "<", ">")

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<str>'(?:[^']|'')*')
      | (?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?(?![\w.]))
      | (?P<op><=|>=|!=|==|=|<|>)
      | (?P<paren>[()])
      | (?P<word>[A-Za-z_][\w.:]*)
    )""",
    re.VERBOSE,
)


def _number(v: Any) -> float | None:
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        return float(v)
    try:
        return float(str(v))
    except (TypeError, ValueError):
        return None


@dataclass(frozen=True)
class Literal:
    text: str
    quoted: bool

    @property
    def number(self) -> float | None:
        return _number(self.text)


@dataclass(frozen=True)
class Compare:
    column: str
    op: str
    value: Literal

    def evaluate(self, row: Mapping[str, Any]) -> bool:
        cell = row[self.column]
        if cell is None or cell is pd.NA or (isinstance(cell, float) and cell != cell):
            return False
        a, b = _number(cell), self.value.number
        if a is not None and b is not None:
            return _apply(self.op, a, b)
        if not self.value.quoted:
            warnings.warn(
                f"comparing non-numeric {self.column}={cell!r} with number {self.value.text}; using text order",
                stacklevel=2,
            )
        return _apply(self.op, str(cell), self.value.text)


@dataclass(frozen=True)
class BoolOp:
    op: str
    parts: tuple

    def evaluate(self, row: Mapping[str, Any]) -> bool:
        if self.op == "and":
            return all(p.evaluate(row) for p in self.parts)
        return any(p.evaluate(row) for p in self.parts)


def _apply(op: str, a, b) -> bool:
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


class Predicate:
    def __init__(self, text: str, tree=None):
        self.text = text
        self.tree = tree

    @property
    def columns(self) -> list[str]:
        out: list[str] = []

        def walk(node):
            if isinstance(node, Compare):
                if node.column not in out:
                    out.append(node.column)
            elif isinstance(node, BoolOp):
                for p in node.parts:
                    walk(p)

        walk(self.tree)
        return out

    def check_columns(self, available: Iterable[str]) -> None:
        have = set(available)
        for c in self.columns:
            if c not in have:
                raise UnknownColumn(c)

    def evaluate(self, row: Mapping[str, Any]) -> bool:
        return True if self.tree is None else self.tree.evaluate(row)

    def __bool__(self) -> bool:
        return self.tree is not None


def _tokenize(text: str) -> list[tuple[str, str]]:
    toks = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise PredicateError(f"unexpected input at position {pos}: {text[pos:pos + 20]!r}")
        kind = m.lastgroup
        val = m.group(kind)
        if kind == "word" and val.lower() in ("and", "or"):
            kind, val = "bool", val.lower()
        if kind == "op" and val == "==":
            val = "="
        toks.append((kind, val))
        pos = m.end()
    return toks


def parse_predicate(text: str | None) -> Predicate:
    """Parse a where clause; an empty clause matches every row."""
    if text is None or not text.strip():
        return Predicate(text or "")
    toks = _tokenize(text)
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, None)

    def take(kind=None, val=None):
        nonlocal pos
        k, v = peek()
        if k is None or (kind and k != kind) or (val and v != val):
            want = val or kind or "token"
            got = v if v is not None else "end of input"
            raise PredicateError(f"expected {want}, got {got!r} in {text!r}")
        pos += 1
        return k, v

    def expr():
        parts = [term()]
        while peek() == ("bool", "or"):
            take()
            parts.append(term())
        return parts[0] if len(parts) == 1 else BoolOp("or", tuple(parts))

    def term():
        parts = [atom()]
        while peek() == ("bool", "and"):
            take()
            parts.append(atom())
        return parts[0] if len(parts) == 1 else BoolOp("and", tuple(parts))

    def atom():
        k, v = peek()
        if (k, v) == ("paren", "("):
            take()
            node = expr()
            take("paren", ")")
            return node
        _, col = take("word")
        _, op = take("op")
        k, v = take()
        if k == "str":
            lit = Literal(v[1:-1].replace("''", "'"), True)
        elif k == "num":
            lit = Literal(v, False)
        else:
            raise PredicateError(f"expected a literal after {col} {op}, got {v!r}")
        return Compare(col, op, lit)

    tree = expr()
    if pos != len(toks):
        raise PredicateError(f"unexpected {toks[pos][1]!r} in {text!r}")
    return Predicate(text, tree)


def filter_view(view: pd.DataFrame, predicate: str | Predicate | None) -> pd.DataFrame:
    pred = predicate if isinstance(predicate, Predicate) else parse_predicate(predicate)
    if not pred:
        return view
    pred.check_columns(view.columns)
    cols = pred.columns
    mask = [pred.evaluate(dict(zip(cols, vals))) for vals in view[cols].itertuples(index=False, name=None)]
    return view[mask].reset_index(drop=True)
