import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    seen = item.config._criteria
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        seen[name] = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen = getattr(config, "_criteria", {})
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in seen.items():
        terminalreporter.write_line(f"{verdict}  {name}")
