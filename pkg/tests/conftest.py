import numpy as np
import pytest

from rirflow.core import synth_rir
from rirflow.filterbank import default_plan

FS = 8000


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def plan():
    return default_plan(FS)


@pytest.fixture(scope="session")
def rir():
    return synth_rir([0.8, 0.6, 0.5, 0.4, 0.3], 0.25, 4000, FS, seed=3)


# acceptance verdicts, printed once per criterion at the end of the run
_VERDICTS = {}


@pytest.fixture
def verdict():
    """``verdict(criterion, ok, detail)`` records and prints one acceptance line."""

    def record(criterion: int, ok: bool, detail: str):
        _VERDICTS.setdefault(criterion, []).append((bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_VERDICTS):
        parts = _VERDICTS[criterion]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
