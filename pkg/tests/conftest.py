import os
import sys
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]


def fd_grad(f, x, h=1e-5, coords=None):
    """Central differences, written independently of the package's helpers."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros(x.size)
    idx = range(x.size) if coords is None else coords
    for i in idx:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g.reshape(x.shape)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def data_root() -> Path:
    return Path(os.environ.get("SPTLAB_DATA_DIR", REPO / "data"))


def has_dataset(name: str) -> bool:
    base = data_root() / name
    return (base / "t10k-images-idx3-ubyte").exists() or (base / "t10k-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not has_dataset("mnist"), reason="MNIST IDX files not found under data root")


@pytest.fixture(scope="session")
def mnist_test():
    from sptlab.data import load_dataset

    if not has_dataset("mnist"):
        pytest.skip("MNIST IDX files not found")
    return load_dataset("mnist", "test", data_root())


@pytest.fixture(scope="session")
def mnist_train():
    from sptlab.data import load_dataset

    if not has_dataset("mnist"):
        pytest.skip("MNIST IDX files not found")
    return load_dataset("mnist", "train", data_root())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
