import numpy as np
import pytest

from celldiff.data import SynthConfig, generate_synthetic

TINY = dict(n_genes=8, n_contexts=3, n_perturbations=6, n_replicates=2, cells_per_replicate=10,
            control_replicates=2, control_cells_per_replicate=12, heldout_contexts=2, seed=5)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(SynthConfig(**TINY))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance line; printed now and again in the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
