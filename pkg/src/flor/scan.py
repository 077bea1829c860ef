"""Replay scan levels and their command-line encoding.

A scan level says how much of a recorded script a replay re-executes:

``prefix``      code before the outermost named loop, then exit
``suffix``      prefix, restore the loop's end state, then the code after it
``validation``  step the outer loop via checkpoints, skipping nested loops
``range:lo:hi`` execute outer iterations ``[lo, hi)`` in full

A range may carry a worker partition ``i/n`` (``range:0:10:1/2``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import combinations
from math import comb

from .errors import FlorError

PREFIX = "prefix"
SUFFIX = "suffix"
VALIDATION = "validation"
RANGE = "range"

# Depth order; a deeper level's executed region contains every shallower one.
DEPTH = {PREFIX: 0, SUFFIX: 1, VALIDATION: 2, RANGE: 3}

_RANGE_RE = re.compile(r"^range:(\d+):(\d+)(?::(\d+)/(\d+))?$")


@dataclass(frozen=True, order=False)
class ScanLevel:
    kind: str
    lo: int | None = None
    hi: int | None = None
    partition: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in DEPTH:
            raise FlorError(f"unknown scan level {self.kind!r}")
        if self.kind == RANGE:
            if self.lo is None or self.hi is None:
                raise FlorError("range scan needs lo and hi")
            if not 0 <= self.lo < self.hi:
                raise FlorError(f"bad range [{self.lo}, {self.hi})")
        if self.partition is not None:
            if self.kind != RANGE:
                raise FlorError("only range scans can be partitioned")
            i, n = self.partition
            if not 0 <= i < n:
                raise FlorError(f"bad partition {i}/{n}")

    @property
    def depth(self) -> int:
        return DEPTH[self.kind]

    def with_partition(self, i: int, n: int) -> ScanLevel:
        return ScanLevel(self.kind, self.lo, self.hi, (i, n))

    def __str__(self) -> str:
        if self.kind != RANGE:
            return self.kind
        text = f"range:{self.lo}:{self.hi}"
        if self.partition is not None:
            text += f":{self.partition[0]}/{self.partition[1]}"
        return text

    @classmethod
    def parse(cls, text: str) -> ScanLevel:
        text = text.strip()
        if text in (PREFIX, SUFFIX, VALIDATION):
            return cls(text)
        m = _RANGE_RE.match(text)
        if m is None:
            raise FlorError(f"cannot parse scan spec {text!r}")
        lo, hi = int(m.group(1)), int(m.group(2))
        part = None
        if m.group(3) is not None:
            part = (int(m.group(3)), int(m.group(4)))
        return cls(RANGE, lo, hi, part)


def deepest(levels) -> ScanLevel:
    """Merge levels into the one whose executed region covers them all."""
    levels = list(levels)
    if not levels:
        raise FlorError("no scan levels to merge")
    best = max(levels, key=lambda s: s.depth)
    if best.kind != RANGE:
        return best
    ranges = [s for s in levels if s.kind == RANGE]
    return ScanLevel(RANGE, min(s.lo for s in ranges), max(s.hi for s in ranges))


def partition_iterations(
    lo: int, hi: int, n: int, checkpointed: set[int] | list[int]
) -> list[tuple[int, int, int]]:
    """Split ``[lo, hi)`` into at most ``n`` contiguous sub-ranges.

    A sub-range may only start where a worker can resume: iteration 0 or
    one past a checkpointed iteration. Returns ``(resume, start, stop)``
    triples where ``resume`` is the checkpointed iteration to restore
    (-1 for the pre-loop state). The split minimizes the largest amount of
    re-executed work, then the spread, then prefers earlier cuts.
    """
    if n < 1:
        raise FlorError("need at least one worker")
    if not 0 <= lo < hi:
        raise FlorError(f"bad range [{lo}, {hi})")
    ck = sorted(set(checkpointed))

    def resume_for(start: int) -> int:
        below = [c for c in ck if c < start]
        return below[-1] if below else -1

    cuts = [c + 1 for c in ck if lo < c + 1 < hi]
    n = min(n, len(cuts) + 1)

    def cost(bounds: list[int]) -> tuple:
        spans = []
        for a, b in zip(bounds, bounds[1:]):
            spans.append(b - (resume_for(a) + 1))
        return (max(spans), sum(s * s for s in spans), bounds)

    best = None
    # exhaustive for small inputs; fall back to a balanced greedy choice
    if comb(len(cuts), n - 1) <= 200_000:
        for chosen in combinations(cuts, n - 1):
            c = cost([lo, *chosen, hi])
            if best is None or c < best:
                best = c
        bounds = best[2]
    else:  # pragma: no cover - only for very long loops
        bounds = [lo]
        for j in range(1, n):
            target = lo + (hi - lo) * j / n
            pick = min((c for c in cuts if c > bounds[-1]), key=lambda c: (abs(c - target), c))
            bounds.append(pick)
        bounds.append(hi)
    return [(resume_for(a), a, b) for a, b in zip(bounds, bounds[1:])]
