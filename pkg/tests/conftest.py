import pytest

# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Yields a recorder; the test's outcome decides PASS/FAIL, ``detail`` adds numbers."""
    info = {"detail": ""}

    def record(detail):
        info["detail"] = detail

    yield record
    failed = getattr(request.node, "rep_call", None)
    passed = failed is not None and failed.passed
    ACCEPTANCE.append((request.node.name, passed, info["detail"]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        line = f"{'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
