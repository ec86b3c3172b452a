import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from polypfcn.datasets import Sample, synth_dataset  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    return synth_dataset(4, 2, 2, (64, 64), 3)


def make_sample(mask, sample_id="s", fill=None):
    mask = np.asarray(mask, dtype=np.uint8)
    if fill is None:
        image = np.random.default_rng(0).integers(0, 256, mask.shape + (3,), dtype=np.uint8)
    else:
        image = np.zeros(mask.shape + (3,), np.uint8)
        image[mask > 0] = fill
    return Sample(sample_id, image, mask)


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion id -> (passed, detail); printed in the terminal summary."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
