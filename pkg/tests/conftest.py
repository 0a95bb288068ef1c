import pytest

_acceptance: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance.append((marker.args[0], "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for title, status in _acceptance:
        terminalreporter.write_line(f"{status}  {title}")


@pytest.fixture
def small_rows():
    return [
        {"id": "a", "lat": 10.0, "lon": 20.0, "embedding": [1.0, 0.0, 0.0, 0.0]},
        {"id": "b", "lat": -5.0, "lon": 179.0, "embedding": [0.0, 3.0, 4.0, 0.0]},
        {"id": "c", "lat": 45.0, "lon": -180.0, "embedding": [1.0, 1.0, 1.0, 1.0]},
    ]
