import numpy as np
import pytest

from trainbench.core import Dataset, SyntheticSpec, derive_rng, generate_synthetic


def label_dataset(labels, n_classes=None):
    """A dataset of 1x1 grey images that only carries labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or int(labels.max()) + 1
    images = np.zeros((labels.size, 1, 1, 1))
    return Dataset(images, labels, [f"c{i}" for i in range(n_classes)])


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticSpec(classes=3, per_class=12, side=16, noise=0.02)
    return generate_synthetic(spec, derive_rng(7, "data"))


ACCEPTANCE_LINES: list = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; all are printed in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
