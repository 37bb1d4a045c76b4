import sys

from hypothesis import settings

# storage-backed properties do real file I/O; wall-clock deadlines only add flakiness
settings.register_profile("arraydb", deadline=None)
settings.load_profile("arraydb")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
