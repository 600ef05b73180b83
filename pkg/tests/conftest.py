_acceptance: dict[int, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    if call.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    ok = call.excinfo is None
    _acceptance[key] = ("PASS" if ok else "FAIL", detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance):
        status, detail = _acceptance[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}".rstrip())
