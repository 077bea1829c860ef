"""Checkpoint storage: serializers, a pluggable blob backend, and retention."""

from __future__ import annotations

import hashlib
import json
import os
import pickle
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol

from .errors import DuplicateCheckpoint, FlorError, MissingCheckpoint, RegistrationError

UNLIMITED = None

# ---------------------------------------------------------------------------
# serialization


def _is_ndarray(obj: Any) -> bool:
    return type(obj).__module__ == "numpy" and type(obj).__name__ == "ndarray"


class Serializer:
    """Capture/restore pair for one registered object.

    Objects may implement ``flor_capture() -> bytes`` / ``flor_restore(bytes)``
    themselves. Otherwise ``state_dict``/``load_state_dict`` and
    ``getstate``/``setstate`` pairs are pickled, and mutable plain data
    (dicts, lists, sets, arrays, instances with a ``__dict__``) is restored
    in place.
    """

    def __init__(self, name: str, obj: Any):
        self.name = name
        self.obj = obj
        self.kind = self._protocol(obj)
        if self.kind is None:
            raise RegistrationError(
                f"cannot checkpoint {name!r} ({type(obj).__name__}): it has no "
                "state capture/restore protocol and cannot be restored in place"
            )
        if self.kind in ("dict", "list", "set", "vars"):
            try:
                self.capture()
            except Exception as e:
                raise RegistrationError(f"cannot checkpoint {name!r}: {e}") from e

    @staticmethod
    def _protocol(obj: Any) -> str | None:
        if callable(getattr(obj, "flor_capture", None)) and callable(
            getattr(obj, "flor_restore", None)
        ):
            return "custom"
        if callable(getattr(obj, "state_dict", None)) and callable(
            getattr(obj, "load_state_dict", None)
        ):
            return "state_dict"
        if callable(getattr(obj, "getstate", None)) and callable(getattr(obj, "setstate", None)):
            return "getstate"
        if _is_ndarray(obj):
            return "ndarray"
        if isinstance(obj, dict):
            return "dict"
        if isinstance(obj, list):
            return "list"
        if isinstance(obj, set):
            return "set"
        if isinstance(obj, (int, float, str, bytes, tuple, frozenset, bool, type(None))):
            return None
        if isinstance(obj, type) or callable(obj) or type(obj).__name__ == "module":
            return None
        if hasattr(obj, "__dict__"):
            return "vars"
        return None

    def capture(self) -> bytes:
        obj = self.obj
        if self.kind == "custom":
            return bytes(obj.flor_capture())
        if self.kind == "state_dict":
            return pickle.dumps(obj.state_dict())
        if self.kind == "getstate":
            return pickle.dumps(obj.getstate())
        if self.kind == "ndarray":
            return pickle.dumps(obj.copy())
        if self.kind == "vars":
            return pickle.dumps(vars(obj))
        return pickle.dumps(obj)

    def restore(self, blob: bytes) -> None:
        obj = self.obj
        if self.kind == "custom":
            obj.flor_restore(blob)
            return
        state = pickle.loads(blob)
        if self.kind == "state_dict":
            obj.load_state_dict(state)
        elif self.kind == "getstate":
            obj.setstate(state)
        elif self.kind == "ndarray":
            obj[...] = state
        elif self.kind == "vars":
            obj.__dict__.clear()
            obj.__dict__.update(state)
        elif self.kind == "dict":
            obj.clear()
            obj.update(state)
        elif self.kind == "list":
            obj[:] = state
        elif self.kind == "set":
            obj.clear()
            obj.update(state)


# ---------------------------------------------------------------------------
# backends


class Backend(Protocol):
    def put(self, name: str, data: bytes) -> None: ...
    def get(self, name: str) -> bytes: ...
    def delete(self, name: str) -> None: ...
    def list(self) -> list[str]: ...
    def exists(self, name: str) -> bool: ...


class LocalBackend:
    """One file per blob under a directory. Writes are atomic renames."""

    def __init__(self, root: Path | str, durable: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.durable = durable

    @property
    def id(self) -> str:
        return f"local:{self.root}"

    def _path(self, name: str) -> Path:
        if "/" in name or name.startswith("."):
            raise ValueError(f"bad blob name {name!r}")
        return self.root / name

    def put(self, name: str, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                if self.durable:
                    f.flush()
                    os.fsync(f.fileno())
            os.replace(tmp, self._path(name))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def get(self, name: str) -> bytes:
        return self._path(name).read_bytes()

    def delete(self, name: str) -> None:
        try:
            self._path(name).unlink()
        except FileNotFoundError:
            pass

    def exists(self, name: str) -> bool:
        return self._path(name).exists()

    def list(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if not p.name.startswith("."))


# ---------------------------------------------------------------------------
# entries


@dataclass(frozen=True)
class CheckpointKey:
    projid: str
    tstamp: str
    filename: str
    ctx_id: int
    value_name: str

    @property
    def run(self) -> tuple[str, str, str]:
        return (self.projid, self.tstamp, self.filename)

    def digest(self) -> str:
        raw = "\x1f".join([self.projid, self.tstamp, self.filename, str(self.ctx_id), self.value_name])
        return hashlib.sha1(raw.encode()).hexdigest()


@dataclass
class CheckpointEntry:
    projid: str
    tstamp: str
    filename: str
    ctx_id: int
    value_name: str
    contents: bytes = field(repr=False)
    loop_name: str = ""
    iteration: int = -1

    @property
    def key(self) -> CheckpointKey:
        return CheckpointKey(self.projid, self.tstamp, self.filename, self.ctx_id, self.value_name)

    def sidecar(self) -> dict:
        return {
            "projid": self.projid,
            "tstamp": self.tstamp,
            "filename": self.filename,
            "ctx_id": self.ctx_id,
            "value_name": self.value_name,
            "loop_name": self.loop_name,
            "loop_iteration": self.iteration,
            "size": len(self.contents),
        }


@dataclass
class CheckpointSet:
    """All entries saved at one outer-loop iteration boundary.

    ``iteration == -1`` is the pre-loop marker: nothing to load, replay
    re-runs the prefix and enters the loop from the start.
    """

    iteration: int
    entries: dict[str, CheckpointEntry] = field(default_factory=dict)

    @property
    def is_pre_loop(self) -> bool:
        return self.iteration < 0


PRE_LOOP = CheckpointSet(-1)


@dataclass(frozen=True)
class RetentionPolicy:
    keep_per_run: int | None = UNLIMITED
    spool_target: Backend | None = None

    def __post_init__(self) -> None:
        if self.keep_per_run is not None and self.keep_per_run < 2:
            raise FlorError("keep_per_run must be at least 2 when eviction is enabled")


def _max_gap(selected: Iterable[int]) -> int:
    prev, worst = -1, 0
    for it in selected:
        worst = max(worst, it - prev)
        prev = it
    return worst


def select_evenly_spaced(iterations: Iterable[int], keep: int) -> list[int]:
    """Pick ``keep`` checkpointed iterations, always including the last.

    The retained set minimizes the largest gap between consecutive restore
    points, counting the pre-loop state as iteration -1. Among optimal sets
    the lexicographically earliest wins.
    """
    its = sorted(set(iterations))
    if keep < 1:
        raise ValueError("keep must be positive")
    if len(its) <= keep:
        return its
    final = its[-1]
    cands = its[:-1]

    def min_points(start: int, gap: int) -> int | None:
        # Fewest intermediate points so every hop from ``start`` to final is <= gap.
        pos, count, i = start, 0, 0
        while final - pos > gap:
            best = None
            while i < len(cands) and cands[i] - pos <= gap:
                if cands[i] > pos:
                    best = cands[i]
                i += 1
            if best is None:
                return None
            pos, count = best, count + 1
        return count

    def feasible(start: int, slots: int, gap: int) -> bool:
        # ``slots`` intermediate points strictly between start and final.
        need = min_points(start, gap)
        if need is None or need > slots:
            return False
        return sum(1 for c in cands if c > start) >= slots

    slots = keep - 1
    lo, hi = 1, final + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(-1, slots, mid):
            hi = mid
        else:
            lo = mid + 1
    gap = lo

    chosen: list[int] = []
    pos = -1
    for remaining in range(slots, 0, -1):
        for c in cands:
            if c <= pos or c - pos > gap:
                continue
            if feasible(c, remaining - 1, gap):
                chosen.append(c)
                pos = c
                break
        else:  # pragma: no cover - feasibility was established above
            raise AssertionError("even spacing search lost feasibility")
    chosen.append(final)
    assert _max_gap(chosen) == gap
    return chosen


# ---------------------------------------------------------------------------
# store


class CheckpointStore:
    def __init__(self, backend: Backend, read_only: bool = False):
        self.backend = backend
        self.read_only = read_only

    @classmethod
    def local(cls, obj_dir: Path | str, read_only: bool = False) -> CheckpointStore:
        return cls(LocalBackend(obj_dir), read_only=read_only)

    # -- entries ---------------------------------------------------------

    def put(self, entry: CheckpointEntry) -> CheckpointKey:
        if self.read_only:
            raise FlorError("checkpoint store is read-only during replay")
        digest = entry.key.digest()
        if self.backend.exists(digest + ".json"):
            raise DuplicateCheckpoint(f"checkpoint already stored for {entry.key}")
        self.backend.put(digest + ".bin", entry.contents)
        # sidecar last: an entry is listed only once its contents are durable
        self.backend.put(digest + ".json", json.dumps(entry.sidecar()).encode())
        return entry.key

    def get(self, key: CheckpointKey) -> CheckpointEntry:
        digest = key.digest()
        try:
            meta = json.loads(self.backend.get(digest + ".json"))
            contents = self.backend.get(digest + ".bin")
        except FileNotFoundError:
            raise MissingCheckpoint(f"no checkpoint stored for {key}") from None
        return self._entry(meta, contents)

    @staticmethod
    def _entry(meta: dict, contents: bytes) -> CheckpointEntry:
        return CheckpointEntry(
            meta["projid"],
            meta["tstamp"],
            meta["filename"],
            meta["ctx_id"],
            meta["value_name"],
            contents,
            meta.get("loop_name", ""),
            meta.get("loop_iteration", -1),
        )

    def _sidecars(self, run: tuple[str, str, str]) -> list[tuple[str, dict]]:
        out = []
        for name in self.backend.list():
            if not name.endswith(".json"):
                continue
            try:
                meta = json.loads(self.backend.get(name))
            except (FileNotFoundError, json.JSONDecodeError):
                continue
            if (meta.get("projid"), meta.get("tstamp"), meta.get("filename")) == tuple(run):
                out.append((name[: -len(".json")], meta))
        return out

    def iterations(self, run: tuple[str, str, str]) -> list[int]:
        return sorted({m["loop_iteration"] for _, m in self._sidecars(run)})

    def _load_set(self, run, iteration: int) -> CheckpointSet:
        cs = CheckpointSet(iteration)
        for digest, meta in self._sidecars(run):
            if meta["loop_iteration"] == iteration:
                cs.entries[meta["value_name"]] = self._entry(meta, self.backend.get(digest + ".bin"))
        return cs

    def latest_for_run(self, run: tuple[str, str, str]) -> CheckpointSet:
        its = self.iterations(run)
        if not its:
            raise MissingCheckpoint(f"no checkpoint available for run {run[1]}", alternative="prefix")
        return self._load_set(run, its[-1])

    def nearest_before(self, run: tuple[str, str, str], k: int) -> CheckpointSet:
        below = [i for i in self.iterations(run) if i < k]
        if not below:
            return PRE_LOOP
        return self._load_set(run, below[-1])

    def at(self, run: tuple[str, str, str], k: int) -> CheckpointSet | None:
        cs = self._load_set(run, k)
        return cs if cs.entries else None

    # -- retention -------------------------------------------------------

    def evict(self, run: tuple[str, str, str], policy: RetentionPolicy) -> set[CheckpointKey]:
        sidecars = self._sidecars(run)
        keys = {
            CheckpointKey(m["projid"], m["tstamp"], m["filename"], m["ctx_id"], m["value_name"]): (d, m)
            for d, m in sidecars
        }
        if policy.keep_per_run is UNLIMITED:
            return set(keys)
        its = sorted({m["loop_iteration"] for _, m in sidecars})
        if len(its) <= policy.keep_per_run:
            return set(keys)
        kept_its = set(select_evenly_spaced(its, policy.keep_per_run))
        retained = set()
        for key, (digest, meta) in keys.items():
            if meta["loop_iteration"] in kept_its:
                retained.add(key)
                continue
            if policy.spool_target is not None:
                policy.spool_target.put(digest + ".bin", self.backend.get(digest + ".bin"))
                policy.spool_target.put(digest + ".json", self.backend.get(digest + ".json"))
            # sidecar first so readers never see an entry without contents
            self.backend.delete(digest + ".json")
            self.backend.delete(digest + ".bin")
        return retained

    # -- content-addressed blobs for logged objects -----------------------

    def put_blob(self, data: bytes) -> str:
        sha = hashlib.sha256(data).hexdigest()
        name = f"blob-{sha}.bin"
        if not self.backend.exists(name):
            self.backend.put(name, data)
        return sha

    def get_blob(self, sha: str) -> bytes:
        return self.backend.get(f"blob-{sha}.bin")


def calibrate(obj_dir: Path | str, size: int = 4 << 20, repeats: int = 3) -> float:
    """Ratio of blob read time to blob write time on this machine's store."""
    backend = LocalBackend(Path(obj_dir) / ".calibration")
    payload = os.urandom(size)
    ratios = []
    for i in range(repeats):
        name = f"ref-{i}"
        t0 = time.perf_counter()
        backend.put(name, payload)
        t1 = time.perf_counter()
        backend.get(name)
        t2 = time.perf_counter()
        backend.delete(name)
        if t1 > t0:
            ratios.append((t2 - t1) / (t1 - t0))
    ratios.sort()
    return ratios[len(ratios) // 2] if ratios else 1.0
