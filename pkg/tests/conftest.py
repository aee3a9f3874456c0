import numpy as np
import pytest

from renal_edl.data import generate_synthetic_cohort
from renal_edl.detection import merge_slices
from renal_edl.pipeline import RunConfig, preprocess


def synthetic_cubes(n, difficulty="easy", side=16, seed=0, proportions=(0.59, 0.16, 0.25)):
    """Preprocessed network inputs and labels for an in-memory synthetic cohort."""
    subjects = generate_synthetic_cohort(n, proportions, difficulty, side, seed)
    cfg = RunConfig(side=side)
    cubes = np.stack([preprocess(s.volume, merge_slices(s.boxes), cfg) for s in subjects]).astype(np.float32)
    return cubes, np.array([s.label for s in subjects])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one numbered acceptance criterion.

    ``check(number, ok, detail)`` stores the line and then asserts, so the
    summary shows failures as well as passes.
    """

    def check(number: int, ok: bool, detail: str):
        ACCEPTANCE_RESULTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
