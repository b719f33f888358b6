from collections import defaultdict

import pytest

CRITERIA = {
    1: "pricing-vs-ranking oracle and printed bound",
    2: "top-1-of-2 spot value",
    3: "equilibrium audit",
    4: "revelation equivalence",
    5: "rank uniformity",
    6: "characteristic weights",
    7: "transform bounds",
    8: "main convergence",
    9: "sample mechanism",
    10: "formula adjudication",
}

_criterion_of: dict[str, int] = {}
_outcomes: dict[int, list[tuple[str, str, str]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criterion_of[item.nodeid] = int(m.args[0])


def pytest_runtest_logreport(report):
    c = _criterion_of.get(report.nodeid)
    if c is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        name = report.nodeid.split("::")[-1]
        _outcomes[c].append((name, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criterion_of:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c, title in CRITERIA.items():
        results = _outcomes.get(c, [])
        if not results:
            if c in _criterion_of.values():
                tr.write_line(f"C{c:<2} NOT RUN  {title}")
            continue
        ok = all(o == "passed" for _, o, _ in results)
        tr.write_line(f"C{c:<2} {'PASS' if ok else 'FAIL'}     {title}")
        for name, outcome, detail in results:
            tr.write_line(f"      {outcome:<7} {name}: {detail}")


@pytest.fixture
def detail(record_property):
    """Attach a human-readable measurement to the acceptance report line."""
    def add(text: str) -> None:
        record_property("detail", text)

    return add
