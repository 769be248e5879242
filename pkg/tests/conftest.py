import pytest

CRITERIA = {
    1: "cost-model exactness",
    2: "gradient suite",
    3: "reduction laws",
    4: "partition decomposition",
    5: "prune fidelity",
    6: "end-to-end desk-scale compression",
    7: "baseline comparison",
    8: "determinism",
}

_results = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, passed, detail)`` records the verdict for criterion n."""
    def record(n, passed, detail=""):
        _results[n] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n in _results:
            ok, detail = _results[n]
            tr.write_line(f"ACCEPTANCE criterion {n} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"ACCEPTANCE criterion {n} ({title}): FAIL  not run")
