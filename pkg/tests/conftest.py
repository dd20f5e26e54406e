import pytest

_RESULTS = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number checked by the test")


@pytest.fixture()
def measured(request):
    """``measured(text)`` attaches the measured values to the criterion summary line."""
    def note(text):
        _DETAILS[request.node.nodeid] = text
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = rep.failed
    if rep.when == "call" or failed:
        prev = _RESULTS.get(n, (True, []))
        _RESULTS[n] = (prev[0] and not failed, prev[1] + [item.nodeid])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, ids = _RESULTS[n]
        details = "; ".join(_DETAILS[i] for i in ids if i in _DETAILS)
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line} ({details})" if details else line)
