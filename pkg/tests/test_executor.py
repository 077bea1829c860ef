import pytest

from flor import executor, planner
from flor.ckptstore import CheckpointStore
from flor.errors import FlorError
from flor.planner import ReplayQuery

from test_scan import _brute as brute_partition

from helpers import STATEMENTS, TRAIN, copy_project, facts, new_project, record, run_tstamps, splice


def three_runs(tmp_path):
    project = new_project(tmp_path / "a")
    record(project)
    record(project, "lr=0.1")
    record(project, "seed=7", "epochs=3")
    return project


def backfill(project, var, where=None, workers=1, partitions=1, source=None):
    if source is not None:
        (project.root / "train.py").write_text(source)
    p = planner.plan(project, ReplayQuery([var], where), partitions=partitions)
    p.confirmed = True
    return executor.execute(project, p, workers=workers)


def test_workers_do_not_change_facts(tmp_path):
    project = three_runs(tmp_path)
    other = copy_project(project, tmp_path / "b")
    y = splice(TRAIN.read_text(), "validation", STATEMENTS["validation"])
    r1 = backfill(project, "val_w2", workers=1, source=y)
    r4 = backfill(other, "val_w2", workers=4, source=y)
    assert r1.ok and r4.ok, (r1.render(), r4.render())
    assert facts(project, "val_w2") == facts(other, "val_w2")
    assert len(facts(project, "val_w2")) == 5 + 5 + 3


def test_backfill_is_idempotent(tmp_path):
    project = three_runs(tmp_path)
    y = splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"])
    rep = backfill(project, "final_b", source=y)
    assert rep.ok and rep.inserted == 3
    before = facts(project, "final_b")
    # everything is materialized now, so a second plan is empty
    again = planner.plan(project, ReplayQuery(["final_b"]))
    assert again.tasks == []
    assert facts(project, "final_b") == before


def test_failed_task_is_isolated(tmp_path):
    project = three_runs(tmp_path)
    y = splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"])
    (project.root / "train.py").write_text(y)
    p = planner.plan(project, ReplayQuery(["final_b"]))
    bad = p.tasks[1]
    bad.source = bad.source.replace("# @suffix", "raise RuntimeError('replay broke')")
    p.confirmed = True
    rep = executor.execute(project, p, workers=2)
    assert [r.status for r in rep.results] == ["done", "failed", "done"]
    assert "replay broke" in rep.results[1].message
    stamps = run_tstamps(project)
    assert len(facts(project, "final_b", stamps[1])) == 0
    assert len(facts(project, "final_b", stamps[0])) == 1
    assert "failed" in rep.render()


def test_unconfirmed_plan_rejected(tmp_path):
    project = new_project(tmp_path)
    record(project)
    (project.root / "train.py").write_text(splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"]))
    p = planner.plan(project, ReplayQuery(["final_b"]))
    with pytest.raises(FlorError, match="confirmed"):
        executor.execute(project, p)


def test_replay_logfiles_kept(tmp_path):
    project = new_project(tmp_path)
    record(project)
    rep = backfill(project, "final_b", source=splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"]))
    assert rep.ok
    kept = rep.results[0].logfiles
    assert kept and all(p.parent == project.meta / "replays" and p.exists() for p in kept)


def test_user_tree_untouched_by_replay(tmp_path):
    project = new_project(tmp_path)
    record(project)
    y = splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"])
    backfill(project, "final_b", source=y)
    assert (project.root / "train.py").read_text() == y


def test_partition_range(tmp_path):
    project = new_project(tmp_path)
    ts = record(project, "epochs=10", "steps=2")
    store = CheckpointStore.local(project.obj_dir, read_only=True)
    parts = executor.partition_range(store, (project.projid, ts, "train.py"), 0, 10, 4)
    bounds = [a for _, _, (a, _) in parts] + [10]
    assert bounds == brute_partition(0, 10, 4, store.iterations((project.projid, ts, "train.py")))
    assert max(b - a for _, _, (a, b) in parts) == 3
    assert all(r == a - 1 for _, r, (a, _) in parts)
