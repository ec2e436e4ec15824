"""Shared fixtures: cached CSTR closed-loop runs and the acceptance report."""
from __future__ import annotations

import time
import warnings

import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """``record(number, title, passed, detail)`` collects one verdict per criterion."""
    table = request.config.stash[ACCEPTANCE_KEY]

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title}"
        if detail:
            line += f" ({detail})"
        table[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(ACCEPTANCE_KEY, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(table):
        terminalreporter.write_line(table[k])


class RunCache:
    """Bundled-config runs, executed once per session and keyed by (name, seed)."""

    def __init__(self, factory):
        self._factory = factory
        self._runs: dict = {}

    def run(self, name: str, seed=None, plot: bool = True):
        key = (name, seed)
        if key not in self._runs:
            from ddmpc.cli import execute_run
            from ddmpc.config import load_config
            out = self._factory.mktemp(f"{name}_{seed}")
            t0 = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                log, summary = execute_run(load_config(name), out, seed=seed, plot=plot)
            self._runs[key] = (log, summary, out, time.perf_counter() - t0)
        return self._runs[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return RunCache(tmp_path_factory)
