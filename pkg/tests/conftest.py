"""Shared fixtures: the three experiment campaigns are run once per session."""
from __future__ import annotations

from importlib import resources

import pytest

from uavcosim import dse

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def system():
    return dse.load_system_config()


def _campaign(name: str, out_dir, system):
    path = resources.files("uavcosim.data").joinpath("campaigns").joinpath(f"{name}.json")
    configs = dse.load_campaign(path)
    return dse.sweep(configs, system, out_dir)


@pytest.fixture(scope="session")
def easy_results(tmp_path_factory, system):
    return _campaign("easy", tmp_path_factory.mktemp("easy"), system)


@pytest.fixture(scope="session")
def endurance_results(tmp_path_factory, system):
    return _campaign("endurance", tmp_path_factory.mktemp("endurance"), system)


@pytest.fixture(scope="session")
def hard_results(tmp_path_factory, system):
    out = tmp_path_factory.mktemp("hard")
    return _campaign("hard", out, system), out


def pick(results, **match):
    hits = [
        r for r in results
        if all((getattr(r, k) == v) if not isinstance(v, float) else abs(getattr(r, k) - v) < 1e-9
               for k, v in match.items())
    ]
    assert len(hits) == 1, f"expected one run matching {match}, found {len(hits)}"
    return hits[0]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")
