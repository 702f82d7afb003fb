import numpy as np
import pytest

from gensis.models import DinoNet

TINY_SHAPE = (4, 4, 2)


@pytest.fixture
def tiny_nets():
    """Student and teacher at 64-bit with dims small enough for finite differences."""

    def make(seed=0, out_dim=4, same=False, shape=TINY_SHAPE):
        rng = np.random.default_rng(seed)
        student = DinoNet.init(rng, shape, hidden=6, embed_dim=5, head_hidden=6, out_dim=out_dim, dtype=np.float64)
        teacher = student.copy() if same else DinoNet.init(rng, shape, hidden=6, embed_dim=5, head_hidden=6,
                                                           out_dim=out_dim, dtype=np.float64)
        for p in student.parameters().values():
            p.requires_grad = True
        return student, teacher

    return make


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's verdict for the end-of-run summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, passed, detail=""):
        results[number] = (bool(passed), detail)
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
