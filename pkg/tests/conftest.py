import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=1000,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


# Acceptance criteria are tagged with @pytest.mark.criterion(n, title); the
# summary prints one PASS/FAIL line per criterion plus any measured details.

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.when == "call" or rep.failed:
        entry["ran"] = entry["ran"] or rep.when == "call"
        entry["ok"] = entry["ok"] and not rep.failed
    if rep.when == "teardown":
        entry["notes"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] or not e["ok"] else "SKIP")
        tr.write_line(f"criterion {n:>2} {status}  {e['title']}")
        for note in e["notes"]:
            tr.write_line(f"              {note}")


@pytest.fixture
def measured(record_property):
    """Attach a measurement line to the criterion summary."""
    return lambda text: record_property("measured", text)
