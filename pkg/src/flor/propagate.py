"""Back-port new logging statements from a newer script version to older ones.

The two versions are aligned statement by statement. Call sites of the flor
API with literal names (``loop("epoch")``, ``log("loss")``, ``arg("lr")``)
are pinned first; everything else is matched greedily by structural hash,
then by hash with identifiers erased (renames), then compound statements
are matched bottom-up by how many of their children already agree. A new
statement is inserted in the older source next to the counterpart of its
closest matched sibling, as a plain line edit so the rest of the file is
left byte for byte.
"""

from __future__ import annotations

import ast
import builtins
import io
import tokenize
from dataclasses import dataclass, field

from .astutil import (
    FlorNames,
    api_calls,
    block_of,
    child_blocks,
    enclosing_stmt,
    literal_name,
    loaded_names,
    loop_name_of,
    parents,
    stored_names,
)
from .errors import FlorError, UnalignableVersion

EXACT = "exact"
RENAMED = "renamed"
MOVED = "moved"
ANCHOR = "anchor"

# compound statements whose absence in the older version is harmless to climb out of
_TRANSPARENT = (ast.With, ast.AsyncWith, ast.Try)
# wrappers an older version may add around a statement's neighbours without changing when they run
_X_TRANSPARENT = (ast.With, ast.AsyncWith, ast.Try, ast.If)
_BUILTINS = set(dir(builtins))


# ---------------------------------------------------------------------------
# extraction


@dataclass(eq=False)
class NewStatement:
    var: str
    stmts: list[ast.stmt]  # dependencies first, the log statement last
    owner: ast.AST
    field: str
    index: int

    @property
    def log_stmt(self) -> ast.stmt:
        return self.stmts[-1]


def _assigned(stmt: ast.stmt) -> set[str]:
    if isinstance(stmt, ast.Assign):
        return set().union(*(stored_names(t) for t in stmt.targets))
    if isinstance(stmt, (ast.AnnAssign, ast.AugAssign)) and stmt.value is not None:
        return stored_names(stmt.target)
    return set()


def extract_new_statements(src_y: str, vars: list[str], tree: ast.Module | None = None) -> list[NewStatement]:
    """The statements of ``src_y`` that produce each var, with their location."""
    tree = tree or ast.parse(src_y)
    names = FlorNames.scan(tree)
    parent = parents(tree)
    calls = api_calls(tree, names, "log")
    out: list[NewStatement] = []
    for var in vars:
        sites = [c for c, n in calls if n == var]
        if not sites:
            raise FlorError(f"{var!r} is not logged in the newer version")
        for call in sites:
            stmt = enclosing_stmt(call, parent)
            owner, fname, idx = block_of(stmt, parent)
            seq = getattr(owner, fname)
            need = loaded_names(stmt)
            unit = [stmt]
            j = idx - 1
            # pull in the chain of assignments directly above that feed the statement
            while j >= 0 and _assigned(seq[j]) & need:
                unit.insert(0, seq[j])
                need = (need - _assigned(seq[j])) | loaded_names(seq[j])
                j -= 1
            out.append(NewStatement(var, unit, owner, fname, idx))
    return out


# ---------------------------------------------------------------------------
# alignment


class _Erase(ast.NodeTransformer):
    def visit_Name(self, node: ast.Name) -> ast.AST:
        return ast.copy_location(ast.Name(id="_", ctx=node.ctx), node)

    def visit_arg(self, node: ast.arg) -> ast.AST:
        node.arg = "_"
        return node


def _hash(node: ast.AST) -> str:
    return ast.dump(node, include_attributes=False)


def _erased_hash(node: ast.AST) -> str:
    import copy

    return ast.dump(_Erase().visit(copy.deepcopy(node)), include_attributes=False)


def _header(node: ast.stmt) -> str:
    """Dump of a compound statement without its nested statement lists."""
    parts = [type(node).__name__]
    for fname, value in ast.iter_fields(node):
        if fname in ("body", "orelse", "finalbody", "handlers", "type_comment"):
            continue
        if isinstance(value, list):
            parts.append(fname + "=" + ",".join(_hash(v) if isinstance(v, ast.AST) else repr(v) for v in value))
        elif isinstance(value, ast.AST):
            parts.append(fname + "=" + _hash(value))
        else:
            parts.append(f"{fname}={value!r}")
    return "|".join(parts)


def _own_nodes(stmt: ast.stmt):
    """Expression nodes of ``stmt`` itself, not of statements nested in it."""
    todo = [c for c in ast.iter_child_nodes(stmt) if not isinstance(c, (ast.stmt, ast.excepthandler))]
    while todo:
        n = todo.pop()
        yield n
        todo.extend(c for c in ast.iter_child_nodes(n) if not isinstance(c, (ast.stmt, ast.excepthandler)))


def _anchor_key(stmt: ast.stmt, names: FlorNames):
    ln = loop_name_of(stmt, names)
    if ln is not None:
        return ("loop", ln)
    keys = []
    for n in _own_nodes(stmt):
        api = names.api_of(n)
        if api in ("log", "arg"):
            lit = literal_name(n)
            if lit is not None:
                keys.append((n.lineno, n.col_offset, api, lit))
        elif api == "checkpointing":
            keys.append((n.lineno, n.col_offset, api, tuple(sorted(k.arg or "" for k in n.keywords))))
    if not keys:
        return None
    keys.sort()
    return tuple(k[2:] for k in keys)


def _stmts(tree: ast.AST) -> list[ast.stmt]:
    out = [n for n in ast.walk(tree) if isinstance(n, ast.stmt)]
    out.sort(key=lambda n: (n.lineno, n.col_offset))
    return out


def _descendants(stmt: ast.AST) -> list[ast.stmt]:
    return [n for n in ast.walk(stmt) if isinstance(n, ast.stmt) and n is not stmt]


@dataclass
class AnchorMap:
    x_tree: ast.Module
    y_tree: ast.Module
    y2x: dict = field(default_factory=dict)
    x2y: dict = field(default_factory=dict)
    kind: dict = field(default_factory=dict)
    renames: dict[str, str] = field(default_factory=dict)

    def pair(self, y: ast.AST, x: ast.AST, kind: str) -> None:
        if y in self.y2x or x in self.x2y:
            raise AssertionError("alignment must stay injective")
        self.y2x[y] = x
        self.x2y[x] = y
        self.kind[y] = kind

    def __len__(self) -> int:
        return len(self.y2x)


def _pair_subtrees(m: AnchorMap, y: ast.stmt, x: ast.stmt, kind: str) -> bool:
    ys, xs = [y, *_descendants(y)], [x, *_descendants(x)]
    if len(ys) != len(xs):
        return False
    for a, b in zip(ys, xs):
        if m.y2x.get(a, b) is not b or m.x2y.get(b, a) is not a:
            return False
    for a, b in zip(ys, xs):
        if a not in m.y2x:
            m.pair(a, b, kind)
    return True


def _greedy_hash_match(m: AnchorMap, ys: list, xs: list, key, kind: str, py: dict, px: dict) -> None:
    x_by: dict[str, list] = {}
    for x in xs:
        if x not in m.x2y:
            x_by.setdefault(key(x), []).append(x)
    order = {n: i for i, n in enumerate(ys)}
    x_order = {n: i for i, n in enumerate(xs)}
    # bigger subtrees first so whole blocks match before their parts
    for y in sorted(ys, key=lambda n: (-len(_descendants(n)), order[n])):
        if y in m.y2x:
            continue
        cands = [x for x in x_by.get(key(y), ()) if x not in m.x2y]
        if not cands:
            continue
        ypar = m.y2x.get(py.get(y))
        rel = order[y] / max(1, len(ys))
        cands.sort(key=lambda x: (px.get(x) is not ypar, abs(x_order[x] / max(1, len(xs)) - rel)))
        for x in cands:
            if _pair_subtrees(m, y, x, kind):
                break


def align(src_x: str, src_y: str, x_tree: ast.Module | None = None, y_tree: ast.Module | None = None) -> AnchorMap:
    x_tree = x_tree or ast.parse(src_x)
    y_tree = y_tree or ast.parse(src_y)
    m = AnchorMap(x_tree, y_tree)
    m.y2x[y_tree] = x_tree
    m.x2y[x_tree] = y_tree
    nx, ny = FlorNames.scan(x_tree), FlorNames.scan(y_tree)
    px, py = parents(x_tree), parents(y_tree)
    xs, ys = _stmts(x_tree), _stmts(y_tree)

    # 1. anchors: API call sites with literal names, paired in order of appearance
    x_anchor: dict = {}
    for x in xs:
        k = _anchor_key(x, nx)
        if k is not None:
            x_anchor.setdefault(k, []).append(x)
    seen: dict = {}
    for y in ys:
        k = _anchor_key(y, ny)
        if k is None:
            continue
        i = seen.get(k, 0)
        seen[k] = i + 1
        cands = x_anchor.get(k, [])
        if i < len(cands):
            m.pair(y, cands[i], ANCHOR)

    # 2. identical subtrees, 3. identical up to identifier names
    _greedy_hash_match(m, ys, xs, _hash, EXACT, py, px)
    _greedy_hash_match(m, ys, xs, _erased_hash, RENAMED, py, px)

    # 4. compound statements bottom-up by agreement of their children
    for y in sorted(ys, key=lambda n: (-n.lineno, -n.col_offset)):
        if y in m.y2x or not any(True for _ in child_blocks(y)):
            continue
        yd = _descendants(y)
        best, best_score = None, 0.0
        for x in xs:
            if x in m.x2y or type(x) is not type(y):
                continue
            xd = set(_descendants(x))
            common = sum(1 for d in yd if m.y2x.get(d) in xd)
            score = 2 * common / max(1, len(yd) + len(xd))
            same_head = _header(x) == _header(y) and m.y2x.get(py[y]) is px[x]
            if score >= 0.5 or same_head:
                if score > best_score or best is None:
                    best, best_score = x, score
        if best is not None:
            m.pair(y, best, EXACT if _header(best) == _header(y) else RENAMED)

    # 5. matched statements whose parents do not correspond have moved
    for y, x in list(m.y2x.items()):
        if y is y_tree or m.kind.get(y) == ANCHOR:
            continue
        if m.y2x.get(py.get(y)) is not px.get(x):
            m.kind[y] = MOVED

    # identifier renames implied by structurally matched statements
    votes: dict[str, set[str]] = {}
    for y, x in m.y2x.items():
        if y is y_tree or m.kind.get(y) == EXACT or type(x) is not type(y):
            continue
        if _erased_hash(y) != _erased_hash(x):
            continue
        yn = [n for n in ast.walk(y) if isinstance(n, ast.Name)]
        xn = [n for n in ast.walk(x) if isinstance(n, ast.Name)]
        for a, b in zip(yn, xn):
            if a.id != b.id:
                votes.setdefault(a.id, set()).add(b.id)
    m.renames = {a: next(iter(b)) for a, b in votes.items() if len(b) == 1}
    return m


# ---------------------------------------------------------------------------
# application


@dataclass
class PropagationResult:
    source: str
    inserted: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    lines: list[int] = field(default_factory=list)  # 1-based first line of each insertion in ``source``


def _first_line(stmt: ast.stmt) -> int:
    decos = getattr(stmt, "decorator_list", None) or []
    return min([stmt.lineno, *(d.lineno for d in decos)])


def _rename(text: str, renames: dict[str, str]) -> str:
    if not renames:
        return text
    toks = list(tokenize.generate_tokens(io.StringIO(text).readline))
    out = []
    prev = None
    for t in toks:
        if t.type == tokenize.NAME and t.string in renames and not (prev is not None and prev.string == "."):
            t = t._replace(string=renames[t.string])
        out.append(t)
        if t.type not in (tokenize.NL, tokenize.COMMENT):
            prev = t
    return tokenize.untokenize(out)


def _segment(src: str, stmt: ast.stmt, indent: str) -> list[str]:
    lines = src.splitlines()[_first_line(stmt) - 1 : stmt.end_lineno]
    own = lines[0][: len(lines[0]) - len(lines[0].lstrip())]
    out = []
    for ln in lines:
        out.append(indent + ln[len(own) :] if ln.startswith(own) else ln)
    return out


def _x_parent_ok(xs: ast.stmt, target: ast.AST, px: dict, m: AnchorMap) -> bool:
    """``xs`` sits in ``target``'s block, possibly inside wrappers that Y lacks."""
    p = px.get(xs)
    while p is not None and p is not target:
        if not isinstance(p, _X_TRANSPARENT) or p in m.x2y:
            return False
        p = px.get(p)
    return p is target


def _lift(xs: ast.stmt, target: ast.AST, px: dict) -> ast.stmt:
    """The ancestor of ``xs`` (or ``xs`` itself) sitting directly in ``target``."""
    while px.get(xs) is not target:
        xs = px[xs]
    return xs


def _place(ns: NewStatement, m: AnchorMap, py: dict, px: dict) -> tuple[int, str, ast.stmt | None]:
    """Line index to insert at (0-based) and indentation, for one new statement."""
    levels = []
    owner, fname, idx = ns.owner, ns.field, ns.index
    while owner not in m.y2x:
        if not isinstance(owner, _TRANSPARENT):
            what = type(owner).__name__
            if isinstance(owner, (ast.For, ast.AsyncFor)):
                what = "loop"
            raise UnalignableVersion(
                f"{ns.var!r}: this version has no counterpart of the enclosing {what} "
                f"(line {owner.lineno} of the newer version)"
            )
        levels.append((owner, fname, idx))
        owner, fname, idx = block_of(owner, py)
    levels.append((owner, fname, idx))
    target = m.y2x[owner]
    unit = set(ns.stmts)
    x_lines = None

    for lvl_owner, lvl_field, lvl_idx in levels:
        seq = getattr(lvl_owner, lvl_field)
        for j in range(lvl_idx - 1, -1, -1):
            s = seq[j]
            if s in unit:
                continue
            xs = m.y2x.get(s)
            if xs is not None and _x_parent_ok(xs, target, px, m):
                xs = _lift(xs, target, px)
                return xs.end_lineno, None, xs
        for j in range(lvl_idx + 1, len(seq)):
            s = seq[j]
            if s in unit:
                continue
            xs = m.y2x.get(s)
            if xs is not None and _x_parent_ok(xs, target, px, m):
                xs = _lift(xs, target, px)
                return _first_line(xs) - 1, None, xs
    # no matched neighbour: keep the relative offset, clamped to the block
    x_seq = getattr(target, fname, None)
    if not isinstance(x_seq, list) or not x_seq:
        raise UnalignableVersion(f"{ns.var!r}: this version has no matching block to insert into")
    pos = min(idx, len(x_seq))
    if pos < len(x_seq):
        return _first_line(x_seq[pos]) - 1, None, x_seq[pos]
    last = x_seq[-1]
    return last.end_lineno, None, last


def _indent_of(lines: list[str], stmt: ast.stmt) -> str:
    ln = lines[stmt.lineno - 1]
    return ln[: stmt.col_offset] if ln[: stmt.col_offset].strip() == "" else " " * stmt.col_offset


def propagate(src_x: str, src_y: str, vars: list[str], amap: AnchorMap | None = None) -> PropagationResult:
    """Insert into ``src_x`` the statements of ``src_y`` that log ``vars``."""
    x_tree = ast.parse(src_x)
    y_tree = ast.parse(src_y)
    res = PropagationResult(src_x)
    x_logged = {n for _, n in api_calls(x_tree, FlorNames.scan(x_tree), "log")}
    todo = [v for v in vars if v not in x_logged]
    if not todo:
        return res
    units = extract_new_statements(src_y, todo, y_tree)
    m = amap or align(src_x, src_y, x_tree, y_tree)
    px, py = parents(x_tree), parents(y_tree)
    x_dumps = {_hash(s) for s in _stmts(x_tree)}
    x_bound = stored_names(x_tree) | _BUILTINS
    lines = src_x.splitlines(keepends=True)
    plain = src_x.splitlines()

    per_var: dict[str, int] = {}
    for ns in units:
        per_var[ns.var] = per_var.get(ns.var, 0) + 1
    for v, n in per_var.items():
        if n > 1:
            res.notes.append(f"{v!r} is logged at {n} call sites in the newer version; all are propagated")

    edits: list[tuple[int, int, list[str], str]] = []
    for order, ns in enumerate(units):
        at, _, ref = _place(ns, m, py, px)
        indent = _indent_of(plain, ref)
        keep = [s for s in ns.stmts[:-1] if _hash(s) not in x_dumps] + [ns.log_stmt]
        renames = {a: b for a, b in m.renames.items() if a not in x_bound}
        text_lines: list[str] = []
        for s in keep:
            text_lines.extend(_segment(src_y, s, indent))
        text = _rename("\n".join(text_lines) + "\n", renames)
        unit_tree = ast.parse(_dedent_block(text))
        missing = loaded_names(unit_tree) - stored_names(unit_tree) - x_bound
        if missing:
            raise UnalignableVersion(
                f"{ns.var!r}: the statement uses {', '.join(sorted(missing))}, which this version never defines"
            )
        edits.append((at, order, text.splitlines(keepends=True), text))

    # apply bottom-up so earlier line numbers stay valid
    for at, _, new_lines, text in sorted(edits, key=lambda e: (-e[0], -e[1])):
        if at > 0 and at <= len(lines) and not lines[at - 1].endswith("\n"):
            lines[at - 1] += "\n"
        lines[at:at] = new_lines
    out = "".join(lines)
    try:
        ast.parse(out)
    except SyntaxError as e:
        raise UnalignableVersion(f"propagated source does not parse: line {e.lineno}: {e.msg}") from e
    res.source = out
    res.inserted = [e[3].rstrip("\n") for e in sorted(edits, key=lambda e: e[1])]
    shift = 0
    for at, _, new_lines, _ in sorted(edits, key=lambda e: (e[0], e[1])):
        res.lines.append(at + shift + 1)
        shift += len(new_lines)
    return res


def _dedent_block(text: str) -> str:
    import textwrap

    return textwrap.dedent(text)
