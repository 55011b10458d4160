import numpy as np
import pytest
import torch

from locpatch.data import synthesize_dataset
from locpatch.detector import ToyDetector, freeze, train_toy_detector

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return synthesize_dataset(12, seed=5, size=96)


@pytest.fixture(scope="session")
def untrained_detector():
    torch.manual_seed(0)
    return freeze(ToyDetector("n", input_size=96))


@pytest.fixture(scope="session")
def quick_detectors():
    """Briefly trained n/s detectors on 100 scenes: good enough to detect most ships."""
    train = synthesize_dataset(100, seed=31, size=96)
    return {
        v: train_toy_detector(train, epochs=12, variant=v, seed=3, ap_floor=None)
        for v in ("n", "s")
    }


@pytest.fixture(scope="session")
def eval_dataset():
    return synthesize_dataset(16, seed=77, size=96)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
