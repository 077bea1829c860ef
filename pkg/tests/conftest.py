import os

import pytest

from flor import instrument

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _isolate(monkeypatch, tmp_path):
    # every test gets its own project and no leftover run context
    for k in ("FLOR_PROJECT", "FLOR_REPLAY_META", "FLOR_TSTAMP", "FLOR_CKPT_RHO", "FLOR_CKPT_ASYNC"):
        monkeypatch.delenv(k, raising=False)
    monkeypatch.setenv("GIT_CONFIG_NOSYSTEM", "1")
    instrument.reset()
    yield
    instrument.reset()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_configure(config):
    os.environ.setdefault("PYTHONHASHSEED", "0")
