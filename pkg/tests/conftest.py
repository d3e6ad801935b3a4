import os

import numpy as np
import pytest

from proxprop.data import cifar10_files, resolve_data_dir


def random_spd(rng, n, shift=1.0):
    G = rng.standard_normal((n, n))
    return G.T @ G + shift * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def cifar_dir():
    try:
        directory = resolve_data_dir()
    except FileNotFoundError:
        return None
    return directory if cifar10_files(directory) else None


requires_cifar = pytest.mark.skipif(
    cifar_dir() is None,
    reason="CIFAR-10 binary batches not found (set $PROXPROP_DATA_DIR)")


# acceptance criteria report one line each at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
