import random
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flor.ckptstore import (
    PRE_LOOP,
    CheckpointEntry,
    CheckpointStore,
    LocalBackend,
    RetentionPolicy,
    Serializer,
    calibrate,
    select_evenly_spaced,
)
from flor.errors import DuplicateCheckpoint, FlorError, MissingCheckpoint, RegistrationError

RUN = ("proj", "2024-01-01T00:00:00", "train.py")


def entry(it, name="model", data=b"x", ctx=None):
    return CheckpointEntry(*RUN, ctx if ctx is not None else 100 + it, name, data, "epoch", it)


def filled(tmp_path, its, names=("model",)):
    store = CheckpointStore.local(tmp_path / "obj")
    for it in its:
        for n in names:
            store.put(entry(it, n, f"{n}@{it}".encode()))
    return store


# -- oracle ------------------------------------------------------------------


def max_gap(sel):
    prev, worst = -1, 0
    for s in sorted(sel):
        worst = max(worst, s - prev)
        prev = s
    return worst


def brute_force_retention(its, keep):
    its = sorted(set(its))
    if len(its) <= keep:
        return its
    final = its[-1]
    best = None
    for rest in combinations(its[:-1], keep - 1):
        sel = [*rest, final]
        key = (max_gap(sel), sel)
        if best is None or key < best:
            best = key
    return best[1]


def test_keep_two_over_ten_epochs():
    assert select_evenly_spaced(range(10), 2) == [4, 9]


def test_keep_three_over_nine():
    assert select_evenly_spaced(range(9), 3) == [2, 5, 8]


@settings(max_examples=300, deadline=None)
@given(st.sets(st.integers(0, 40), min_size=1, max_size=20), st.integers(2, 8))
def test_even_spacing_matches_brute_force(its, keep):
    got = select_evenly_spaced(its, keep)
    assert got == brute_force_retention(its, keep)
    assert max(its) in got


# -- store ---------------------------------------------------------------------


def test_put_get_round_trip(tmp_path):
    store = filled(tmp_path, [0])
    got = store.get(entry(0).key)
    assert got.contents == b"model@0" and got.iteration == 0


def test_two_objects_share_ctx(tmp_path):
    store = filled(tmp_path, [0], names=("model", "optimizer"))
    cs = store.latest_for_run(RUN)
    assert set(cs.entries) == {"model", "optimizer"}
    assert len({e.ctx_id for e in cs.entries.values()}) == 1


def test_duplicate_rejected(tmp_path):
    store = filled(tmp_path, [0])
    with pytest.raises(DuplicateCheckpoint):
        store.put(entry(0))


def test_read_only_store_rejects_puts(tmp_path):
    store = CheckpointStore.local(tmp_path / "obj", read_only=True)
    with pytest.raises(FlorError):
        store.put(entry(0))


def test_nearest_before_and_latest(tmp_path):
    store = filled(tmp_path, range(5))
    assert store.nearest_before(RUN, 3).iteration == 2
    assert store.nearest_before(RUN, 0) is PRE_LOOP
    assert store.latest_for_run(RUN).iteration == 4


def test_no_checkpoint_names_alternative(tmp_path):
    store = CheckpointStore.local(tmp_path / "obj")
    with pytest.raises(MissingCheckpoint) as e:
        store.latest_for_run(RUN)
    assert "no checkpoint available" in str(e.value)
    assert e.value.alternative == "prefix"


def test_evict_keep_two(tmp_path):
    store = filled(tmp_path, range(10))
    kept = store.evict(RUN, RetentionPolicy(keep_per_run=2))
    assert sorted(k.ctx_id - 100 for k in kept) == [4, 9]
    assert store.iterations(RUN) == [4, 9]
    assert store.nearest_before(RUN, 7).iteration == 4


def test_evict_unlimited_is_identity(tmp_path):
    store = filled(tmp_path, range(6))
    store.evict(RUN, RetentionPolicy())
    assert store.iterations(RUN) == list(range(6))


def test_evict_fewer_than_keep_is_noop(tmp_path):
    store = filled(tmp_path, [0, 1])
    store.evict(RUN, RetentionPolicy(keep_per_run=3))
    assert store.iterations(RUN) == [0, 1]


def test_evict_spools(tmp_path):
    store = filled(tmp_path, range(4))
    spool = LocalBackend(tmp_path / "spool")
    store.evict(RUN, RetentionPolicy(keep_per_run=2, spool_target=spool))
    moved = CheckpointStore(spool)
    assert sorted(set(store.iterations(RUN)) | set(moved.iterations(RUN))) == [0, 1, 2, 3]
    assert moved.get(entry(0).key).contents == b"model@0"


def test_keep_must_be_two_or_more():
    with pytest.raises(FlorError):
        RetentionPolicy(keep_per_run=1)


def test_blobs_are_content_addressed(tmp_path):
    store = CheckpointStore.local(tmp_path / "obj")
    a = store.put_blob(b"abc")
    assert store.put_blob(b"abc") == a
    assert store.get_blob(a) == b"abc"
    # blobs never show up as checkpoints
    assert store.iterations(RUN) == []


def test_calibrate_is_positive(tmp_path):
    assert calibrate(tmp_path / "obj", size=1 << 16) > 0


# -- serializers ---------------------------------------------------------------


class WithStateDict:
    def __init__(self):
        self.w = [1.0, 2.0]

    def state_dict(self):
        return {"w": list(self.w)}

    def load_state_dict(self, s):
        self.w = list(s["w"])


class Plain:
    def __init__(self):
        self.a = 1
        self.b = {"k": [1, 2]}


def test_serializers_round_trip():
    cases = [WithStateDict(), random.Random(3), {"a": 1}, [1, 2, 3], {1, 2}, Plain()]
    for obj in cases:
        ser = Serializer("o", obj)
        blob = ser.capture()
        # mutate, then restore in place
        if isinstance(obj, WithStateDict):
            obj.w[0] = 99
        elif isinstance(obj, random.Random):
            expected = obj.random()
        elif isinstance(obj, dict):
            obj["a"] = 2
        elif isinstance(obj, (list, set)):
            obj.clear()
        else:
            obj.a = 5
        ser.restore(blob)
        if isinstance(obj, WithStateDict):
            assert obj.w == [1.0, 2.0]
        elif isinstance(obj, random.Random):
            assert obj.random() == expected
        elif isinstance(obj, dict):
            assert obj == {"a": 1}
        elif isinstance(obj, list):
            assert obj == [1, 2, 3]
        elif isinstance(obj, set):
            assert obj == {1, 2}
        else:
            assert obj.a == 1 and obj.b == {"k": [1, 2]}


def test_numpy_arrays_restore_in_place():
    np = pytest.importorskip("numpy")
    arr = np.arange(4.0)
    ser = Serializer("arr", arr)
    blob = ser.capture()
    arr[:] = 0
    ser.restore(blob)
    assert arr.tolist() == [0.0, 1.0, 2.0, 3.0]


@pytest.mark.parametrize("obj", [3, "text", (1, 2), len, int])
def test_unrestorable_objects_rejected_by_name(obj):
    with pytest.raises(RegistrationError, match="'thing'"):
        Serializer("thing", obj)
