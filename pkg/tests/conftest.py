import numpy as np
import pytest
import torch

from msfuse.model import featurize_cohort
from msfuse.synth import SynthConfig, generate_cohort

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SynthConfig(patient_count=40, seed=3, volume_dims=(16, 16, 8)))


@pytest.fixture(scope="session")
def small_features(small_cohort):
    return featurize_cohort(small_cohort)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Store one verdict line per acceptance criterion; printed at the end of the run."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
