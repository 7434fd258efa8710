import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Register a numbered acceptance criterion; its outcome is reported at session end."""

    def register(number: int, title: str):
        _RESULTS[request.node.nodeid] = [number, title, None, ""]

    return register


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _RESULTS.get(item.nodeid)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry[2] = rep.passed
        if rep.failed:
            entry[3] = str(rep.longrepr).strip().splitlines()[-1][:160]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, why in sorted(_RESULTS.values()):
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  ({why})" if why else ""))
