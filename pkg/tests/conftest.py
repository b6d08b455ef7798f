import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trojanscan import experiments as E  # noqa: E402


@pytest.fixture(scope="session")
def desk_data():
    return E.make_dataset(7)


@pytest.fixture(scope="session")
def desk_fixture(desk_data):
    """Seed-7 clean twin and BadNet model with a white 3x3 bottom-right square on class 0."""
    return E.make_fixture(7, data=desk_data)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[ACCEPTANCE] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = mark.args
    measured = dict(item.user_properties).get("measured", "")
    entry = item.config.stash[ACCEPTANCE].setdefault(number, {"title": title, "ok": True, "measured": []})
    entry["ok"] = entry["ok"] and rep.passed
    if measured:
        entry["measured"].append(measured)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        r = results[number]
        line = f"criterion {number:2d}: {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["measured"]:
            line += "  [" + "; ".join(r["measured"]) + "]"
        terminalreporter.write_line(line)
