"""Acceptance reporting: tests marked ``@pytest.mark.ac(n)`` roll up into one line per criterion."""

import pytest

AC_TITLES = {
    1: "loss gradients match central differences",
    2: "compound Dice + weighted CE oracle",
    3: "InfoNCE oracle",
    4: "inpainting mask geometry",
    5: "momentum encoder and negatives queue mechanics",
    6: "classification metrics oracle",
    7: "preprocessing oracle",
    8: "end-to-end desk-scale run",
    9: "determinism of re-runs",
    10: "GradCAM contract and localisation",
}

_outcomes: dict[int, list[tuple[str, bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "ac(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("ac")
    if marker is None:
        return
    n = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        _outcomes.setdefault(n, []).append((item.name, not failed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in AC_TITLES.items():
        results = _outcomes.get(n)
        if not results:
            status, detail = "FAIL", "not run"
        else:
            bad = [name for name, ok in results if not ok]
            status = "FAIL" if bad else "PASS"
            detail = f"{len(results) - len(bad)}/{len(results)} checks" + (f"; failed: {', '.join(bad)}" if bad else "")
        terminalreporter.write_line(f"AC{n} {status}: {title} ({detail})")
