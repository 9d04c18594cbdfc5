import os
from pathlib import Path

import pytest

from fedmatch.datasets import load_mnist


def _real_mnist_dir():
    for candidate in (os.environ.get("FEDMATCH_MNIST_DIR"),
                      Path(__file__).resolve().parent.parent / "data" / "mnist"):
        if not candidate:
            continue
        path = Path(candidate)
        if (path / "train-images-idx3-ubyte").exists() or \
                (path / "train-images-idx3-ubyte.gz").exists():
            return path
    return None


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Directory of MNIST-format IDX files: real MNIST if present, else the
    rendered-digit stand-in (see datagen)."""
    real = _real_mnist_dir()
    if real is not None:
        return real
    from datagen import write_digit_idx
    return write_digit_idx(tmp_path_factory.mktemp("digits"))


@pytest.fixture(scope="session")
def mnist_subset(mnist_dir):
    """(train, test) capped at 6000/1000 examples, the desk-scale setting."""
    train, test = load_mnist(mnist_dir)
    return train.head(6000), test.head(1000)
