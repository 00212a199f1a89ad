import pytest

# criterion name -> list of (passed, detail), in collection order
CRITERIA: dict[str, list] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            CRITERIA.setdefault(mark.args[0], [])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed and not hasattr(rep, "wasxfail")
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if not ok and not detail:
            detail = rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else rep.outcome
        CRITERIA[mark.args[0]].append((ok, detail))


def pytest_terminal_summary(terminalreporter):
    ran = {name: parts for name, parts in CRITERIA.items() if parts}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for name, parts in ran.items():
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        details = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  [{details}]" if details else ""))
