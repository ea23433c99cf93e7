import os

import pytest

from gmed.stream import load_mnist, mnist_paths

DEFAULT_DATA_DIR = "/root/data/mnist"


def data_dir():
    return os.environ.get("GMED_DATA_DIR", DEFAULT_DATA_DIR)


def have_mnist():
    try:
        mnist_paths(data_dir(), "train")
        mnist_paths(data_dir(), "test")
    except FileNotFoundError:
        return False
    return True


@pytest.fixture(scope="session")
def mnist():
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not found under {data_dir()} (set GMED_DATA_DIR)")
    return load_mnist(data_dir())


# acceptance criteria report one line each at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
