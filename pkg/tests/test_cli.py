import io
import subprocess
import sys

import pytest

from flor.cli import EXIT_EMPTY, EXIT_ERROR, EXIT_OK, main

from helpers import STATEMENTS, TRAIN, facts, git, new_project, record, splice


@pytest.fixture
def project(tmp_path, monkeypatch):
    proj = new_project(tmp_path)
    record(proj)
    record(proj, "lr=0.1")
    monkeypatch.chdir(proj.root)
    monkeypatch.setenv("FLOR_PROJECT", str(proj.root))
    return proj


def run(capsys, *argv, stdin=None, monkeypatch=None):
    if stdin is not None:
        monkeypatch.setattr(sys, "stdin", io.StringIO(stdin))
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def test_replay_dry_run_prints_plan(project, capsys):
    (project.root / "train.py").write_text(splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"]))
    rc, out, _ = run(capsys, "replay", "final_b", "--dry-run", "--workers", "2")
    assert rc == EXIT_OK
    lines = out.strip().splitlines()
    assert sum(" suffix " in l for l in lines) == 2
    assert lines[-1].startswith("total serial") and "parallel(2)" in lines[-1]
    assert facts(project, "final_b") == []


def test_replay_declined(project, capsys, monkeypatch):
    (project.root / "train.py").write_text(splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"]))
    rc, out, _ = run(capsys, "replay", "final_b", stdin="n\n", monkeypatch=monkeypatch)
    assert rc == EXIT_EMPTY and "aborted" in out
    assert facts(project, "final_b") == []


def test_replay_confirmed_then_nothing_left(project, capsys, monkeypatch):
    (project.root / "train.py").write_text(splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"]))
    head = git(project.root, "rev-parse", "HEAD")
    rc, out, _ = run(capsys, "replay", "final_b", stdin="y\n", monkeypatch=monkeypatch)
    assert rc == EXIT_OK, out
    assert "2/2 done" in out
    assert len(facts(project, "final_b")) == 2
    rc, out, _ = run(capsys, "replay", "final_b", "-y")
    assert rc == EXIT_EMPTY and "nothing to backfill" in out
    assert git(project.root, "rev-parse", "HEAD") == head


def test_replay_where_on_generated_column(project, capsys):
    (project.root / "train.py").write_text(splice(TRAIN.read_text(), "suffix", STATEMENTS["suffix"]))
    rc, _, err = run(capsys, "replay", "final_b", "final_b > 1", "-y")
    assert rc == EXIT_ERROR and "generating" in err


def test_replay_unknown_var(project, capsys):
    rc, out, _ = run(capsys, "replay", "nowhere", "-y")
    # no version can produce it, so every run is listed as excluded
    assert rc == EXIT_EMPTY and "nothing to backfill" in out
    assert out.count("excluded") == 2 and "'nowhere'" in out


def test_dataframe_and_csv(project, capsys, tmp_path):
    rc, out, _ = run(capsys, "dataframe", "val_err")
    assert rc == EXIT_OK
    assert out.splitlines()[0].split() == ["projid", "tstamp", "filename", "epoch", "val_err"]
    assert len(out.strip().splitlines()) == 1 + 10
    path = tmp_path / "v.csv"
    rc, _, _ = run(capsys, "dataframe", "val_err", "--where", "epoch >= 3", "--csv", str(path))
    assert rc == EXIT_OK
    assert len(path.read_bytes().split(b"\r\n")) == 1 + 4 + 1


def test_dataframe_unknown_column(project, capsys):
    rc, _, err = run(capsys, "dataframe", "val_err", "--where", "acc > 1")
    assert rc == EXIT_ERROR and "acc" in err


def test_versions_and_stat(project, capsys):
    rc, out, _ = run(capsys, "versions")
    assert rc == EXIT_OK
    rows = out.strip().splitlines()
    assert len(rows) == 2 and all("flor.shadow.main" in r for r in rows)
    vid = rows[0].split()[0]
    rc, out, _ = run(capsys, "stat", vid)
    assert rc == EXIT_OK
    est = [float(l.split()[-1]) for l in out.splitlines() if l.startswith("estimate")]
    assert len(est) == 4 and est == sorted(est)
    assert "t_prefix" in out and "t_suffix" in out


def test_stat_unknown(project, capsys):
    rc, _, err = run(capsys, "stat", "zzzz")
    assert rc == EXIT_ERROR and "no version" in err


def test_bad_usage_exit_code(capsys):
    with pytest.raises(SystemExit) as e:
        main(["replay"])
    assert e.value.code == EXIT_ERROR


def test_console_entry_point(project):
    proc = subprocess.run([sys.executable, "-m", "flor", "versions"], cwd=project.root, capture_output=True, text=True)
    assert proc.returncode == 0 and "flor.shadow.main" in proc.stdout
