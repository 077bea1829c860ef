import pytest

from flor import logstore as ls
from flor import vcs
from flor.errors import VersionNotFound
from flor.project import Project

from helpers import git, new_project


def snapshot(project, tstamp, db):
    return vcs.autocommit(project, tstamp, db)


def test_autocommit_leaves_user_branch_alone(tmp_path):
    project = new_project(tmp_path)
    head = git(project.root, "rev-parse", "HEAD")
    (project.root / "train.py").write_text("print('edited')\n")
    git(project.root, "add", "train.py")
    staged = git(project.root, "diff", "--cached", "--name-only")
    with ls.Database(project.db_path) as db:
        rec = snapshot(project, "2024-01-01T00:00:00", db)
    assert git(project.root, "rev-parse", "HEAD") == head
    assert git(project.root, "diff", "--cached", "--name-only") == staged
    assert git(project.root, "symbolic-ref", "--short", "HEAD") == "main"
    assert rec.branch == "flor.shadow.main"
    # the snapshot holds the working-tree edit and none of the metadata
    assert vcs.show(project, rec.vid, "train.py") == "print('edited')\n"
    files = git(project.root, "ls-tree", "-r", "--name-only", rec.vid).split()
    assert not any(f.startswith(".flor/") and not f.startswith(".flor/logs/") for f in files)


def test_shadow_history_chain_and_lookup(tmp_path):
    project = new_project(tmp_path)
    with ls.Database(project.db_path) as db:
        a = snapshot(project, "2024-01-01T00:00:00", db)
        (project.root / "train.py").write_text("v2\n")
        b = snapshot(project, "2024-01-01T00:05:00", db)
        assert b.parent_vid == a.vid and a.parent_vid is None
        assert vcs.lookup(db, project.projid, "2024-01-01T00:00:00") == a.vid
        assert vcs.lookup(db, project.projid, "2024-01-01T00:04:59") == a.vid
        assert vcs.lookup(db, project.projid, "2024-01-01T00:05:00") == b.vid
        with pytest.raises(VersionNotFound):
            vcs.lookup(db, project.projid, "2023-12-31T00:00:00")
        recs = vcs.versions(db, project.projid)
        assert [r.vid for r in recs] == [a.vid, b.vid]
        assert recs[0].ts_end == "2024-01-01T00:05:00" and recs[1].ts_end is None
        assert [r.vid for r in vcs.versions(db, project.projid, "tstamp >= '2024-01-01T00:01:00'")] == [b.vid]
        assert [r.vid for r in vcs.resolve_prefix(db, project.projid, a.vid[:7])] == [a.vid]


def test_restore_materializes_tree(tmp_path):
    project = new_project(tmp_path)
    (project.root / "data.txt").write_text("d\n")
    with ls.Database(project.db_path) as db:
        rec = snapshot(project, "2024-01-01T00:00:00", db)
    (project.root / "train.py").write_text("changed\n")
    dest = vcs.restore(project, rec.vid, tmp_path / "ws")
    assert (dest / "data.txt").read_text() == "d\n"
    assert (dest / "train.py").read_text() != "changed\n"


def test_unknown_and_foreign_versions(tmp_path):
    project = new_project(tmp_path)
    with pytest.raises(VersionNotFound):
        vcs.restore(project, "deadbeef")
    # a commit on the user's branch is not a recorded version
    head = git(project.root, "rev-parse", "HEAD")
    with pytest.raises(VersionNotFound, match="shadow"):
        vcs.show(project, head, "train.py")


def test_repo_created_when_missing(tmp_path):
    root = tmp_path / "bare"
    root.mkdir()
    (root / "x.py").write_text("x = 1\n")
    project = Project(root).ensure()
    with ls.Database(project.db_path) as db:
        rec = snapshot(project, "2024-01-01T00:00:00", db)
    assert vcs.show(project, rec.vid, "x.py") == "x = 1\n"


def test_user_commits_ignore_metadata(tmp_path):
    project = new_project(tmp_path)
    with ls.Database(project.db_path) as db:
        snapshot(project, "2024-01-01T00:00:00", db)
    git(project.root, "add", "-A")
    assert ".flor" not in git(project.root, "diff", "--cached", "--name-only")
