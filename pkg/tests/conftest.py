import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CACHE = Path(os.environ.get("FEDALIGN_CACHE", Path.home() / ".cache" / "fedalign"))


def _mnist_dir():
    """Official IDX files from $FEDALIGN_MNIST_DIR, else the mlxtend 5k sample written once."""
    from fedalign.data import find_idx_pair, write_mnist_subset

    env = os.environ.get("FEDALIGN_MNIST_DIR")
    if env:
        return Path(env), 10_000
    target = CACHE / "mnist5k"
    if find_idx_pair(target, "train") is None:
        try:
            write_mnist_subset(target)
        except ImportError:
            return None, None
    return target, None


@pytest.fixture(scope="session")
def mnist_dir():
    path, _ = _mnist_dir()
    if path is None:
        pytest.skip("no MNIST: set FEDALIGN_MNIST_DIR or pip install --no-deps mlxtend")
    return path


@pytest.fixture(scope="session")
def mnist_setup():
    """Base config dict for the 784-64-10 MNIST desk setup."""
    path, train_subset = _mnist_dir()
    if path is None:
        pytest.skip("no MNIST: set FEDALIGN_MNIST_DIR or pip install --no-deps mlxtend")
    return {"dataset": "mnist", "data_dir": str(path), "train_subset": train_subset,
            "n_clients": 20, "rounds": 40, "attack": {"attack_ratio": 0.2, "poison_ratio": 0.5}}


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
