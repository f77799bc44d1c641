from pathlib import Path

import numpy as np
import pytest

from dtgfn.data import Dataset, load_csv

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def iris() -> Dataset:
    return load_csv(DATA_DIR / "iris.csv", "species")


@pytest.fixture(scope="session")
def pima() -> Dataset:
    return load_csv(DATA_DIR / "pima.csv", "outcome")


def binary_patterns(p: int) -> np.ndarray:
    """All 2**p rows of a p-column binary design."""
    return np.array([[(k >> j) & 1 for j in range(p)] for k in range(2**p)], dtype=np.float64)


def make_dataset(X, y, num_classes=None) -> Dataset:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    C = num_classes or max(2, int(y.max()) + 1)
    return Dataset(X, y, C, tuple(f"x{k}" for k in range(X.shape[1])), "test", raw=X.copy())


@pytest.fixture
def tiny_binary() -> Dataset:
    """Every pattern of 3 binary features; label = x0 xor x1."""
    X = binary_patterns(3)
    return make_dataset(X, (X[:, 0].astype(int) ^ X[:, 1].astype(int)))


# one PASS/FAIL line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
