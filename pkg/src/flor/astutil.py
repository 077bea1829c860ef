"""Syntax-tree helpers shared by the planner and statement propagation."""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from typing import Iterator

API = ("log", "arg", "loop", "checkpointing")

# statement fields that hold nested statement lists
BLOCK_FIELDS = ("body", "orelse", "finalbody", "handlers")


@dataclass
class FlorNames:
    """How a module refers to the flor API: module aliases and bare imports."""

    modules: set[str] = field(default_factory=set)
    direct: dict[str, str] = field(default_factory=dict)  # local name -> api function

    @classmethod
    def scan(cls, tree: ast.AST) -> FlorNames:
        out = cls()
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                for a in node.names:
                    if a.name == "flor":
                        out.modules.add(a.asname or "flor")
            elif isinstance(node, ast.ImportFrom) and node.module == "flor":
                for a in node.names:
                    if a.name in API:
                        out.direct[a.asname or a.name] = a.name
        if not out.modules and not out.direct:
            out.modules.add("flor")
        return out

    def api_of(self, call: ast.AST) -> str | None:
        if not isinstance(call, ast.Call):
            return None
        f = call.func
        if isinstance(f, ast.Attribute) and isinstance(f.value, ast.Name) and f.value.id in self.modules:
            return f.attr if f.attr in API else None
        if isinstance(f, ast.Name):
            return self.direct.get(f.id)
        return None


def literal_name(call: ast.Call) -> str | None:
    """The literal first (or ``name=``) argument of an API call, if any."""
    arg = call.args[0] if call.args else None
    if arg is None:
        for kw in call.keywords:
            if kw.arg == "name":
                arg = kw.value
    if isinstance(arg, ast.Constant) and isinstance(arg.value, str):
        return arg.value
    return None


def loop_name_of(stmt: ast.AST, names: FlorNames) -> str | None:
    """Loop name if ``stmt`` is ``for ... in flor.loop("name", ...)``."""
    if isinstance(stmt, (ast.For, ast.AsyncFor)) and names.api_of(stmt.iter) == "loop":
        return literal_name(stmt.iter) or "<dynamic>"
    return None


def parents(tree: ast.AST) -> dict[ast.AST, ast.AST]:
    out = {}
    for node in ast.walk(tree):
        for child in ast.iter_child_nodes(node):
            out[child] = node
    return out


def enclosing_stmt(node: ast.AST, parent: dict) -> ast.stmt:
    while not isinstance(node, ast.stmt):
        node = parent[node]
    return node


def block_of(stmt: ast.stmt, parent: dict) -> tuple[ast.AST, str, int]:
    """(container, field, index) locating ``stmt`` in its statement list."""
    owner = parent[stmt]
    for fname in BLOCK_FIELDS:
        seq = getattr(owner, fname, None)
        if isinstance(seq, list):
            for i, s in enumerate(seq):
                if s is stmt:
                    return owner, fname, i
    raise ValueError("statement is not in a statement list")


def child_blocks(node: ast.AST) -> Iterator[tuple[str, list]]:
    for fname in BLOCK_FIELDS:
        seq = getattr(node, fname, None)
        if isinstance(seq, list) and seq and isinstance(seq[0], (ast.stmt, ast.excepthandler)):
            yield fname, seq


def api_calls(tree: ast.AST, names: FlorNames, fn: str) -> list[tuple[ast.Call, str | None]]:
    out = []
    for node in ast.walk(tree):
        if names.api_of(node) == fn:
            out.append((node, literal_name(node)))
    out.sort(key=lambda p: (p[0].lineno, p[0].col_offset))
    return out


def scope_of(node: ast.AST, parent: dict) -> ast.AST:
    """Innermost enclosing function (or the module)."""
    p = parent.get(node)
    while p is not None and not isinstance(p, (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda)):
        p = parent.get(p)
    if p is None:
        n = node
        while n in parent:
            n = parent[n]
        return n
    return p


def loaded_names(node: ast.AST) -> set[str]:
    return {n.id for n in ast.walk(node) if isinstance(n, ast.Name) and isinstance(n.ctx, ast.Load)}


def stored_names(node: ast.AST) -> set[str]:
    out = set()
    for n in ast.walk(node):
        if isinstance(n, ast.Name) and isinstance(n.ctx, (ast.Store, ast.Del)):
            out.add(n.id)
        elif isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            out.add(n.name)
        elif isinstance(n, (ast.Import, ast.ImportFrom)):
            for a in n.names:
                out.add((a.asname or a.name).split(".")[0])
        elif isinstance(n, ast.arg):
            out.add(n.arg)
        elif isinstance(n, ast.ExceptHandler) and n.name:
            out.add(n.name)
    return out
