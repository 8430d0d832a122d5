import numpy as np
import pytest

from twoscale.geometry import DyadicSquare, MacroPartition, refine


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_refinement(rng, steps=3, start=1, per_step=2):
    p = MacroPartition.uniform(start)
    for _ in range(steps):
        sq = p.sorted()
        pick = rng.choice(len(sq), size=min(per_step, len(sq)), replace=False)
        p = refine(p, [sq[i] for i in pick])
    return p


def sq(m, i, j):
    return DyadicSquare(m, i, j)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(cid, ok, text):
        line = f"{cid} {'PASS' if ok else 'FAIL'}: {text}"
        lines.append(line)
        print(line)
        return ok

    def info(cid, text):
        line = f"{cid} INFO: {text}"
        lines.append(line)
        print(line)

    report.info = info
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in lines:
            terminalreporter.write_line(ln)
