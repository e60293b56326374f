import pytest

_CRITERIA: dict[int, list[tuple[str, str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed or report.skipped):
        return
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    _CRITERIA.setdefault(marker.args[0], []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        status = "PASS" if all(s == "PASS" for _, s, _ in parts) else "FAIL"
        details = " | ".join(d for _, _, d in parts if d)
        terminalreporter.write_line(f"criterion {n}: {status}  {details}")
