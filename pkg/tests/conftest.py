import pytest

from stdmarg.dataset import TrialDataset

_VERDICTS = {}


@pytest.fixture
def d4():
    """Four rows (y, x, z): (1,0,0), (3,1,0), (2,0,1), (6,1,1)."""
    return TrialDataset(y=[1, 3, 2, 6], x=[[0], [1], [0], [1]], z=[0, 0, 1, 1])


@pytest.fixture
def verdict():
    """Record one acceptance criterion: a pass/fail headline plus its checks.

    ``checks`` is a list of (description, passed); ``notes`` are printed
    but do not affect the outcome.  Returns the overall verdict so tests can
    ``assert verdict(...)``.
    """

    def record(number, title, checks, notes=()):
        ok = all(good for _, good in checks)
        lines = [f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}"]
        lines += [f"        [{'ok' if good else 'XX'}] {label}" for label, good in checks]
        lines += [f"        note: {n}" for n in notes]
        _VERDICTS[number] = lines
        print("\n".join(lines))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        for line in _VERDICTS[number]:
            terminalreporter.write_line(line)
