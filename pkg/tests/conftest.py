import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from invometric.datasets import write_idx  # noqa: E402

MNIST_ENV = "INVOMETRIC_MNIST_DIR"


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """An MNIST-layout directory of IDX files.

    Uses the directory in ``$INVOMETRIC_MNIST_DIR`` when set. Otherwise the
    5,000-image MNIST sample bundled with mlxtend is split (seeded) into
    4,000 train and 1,000 test images and written as IDX files.
    """
    if os.environ.get(MNIST_ENV):
        return Path(os.environ[MNIST_ENV])
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    labels = y.astype(np.uint8)
    out = tmp_path_factory.mktemp("mnist")
    for split, idx in (("train", order[:4000]), ("t10k", order[4000:])):
        write_idx(out / f"{split}-images-idx3-ubyte", out / f"{split}-labels-idx1-ubyte",
                  images[idx], labels[idx])
    return out


# -------------------------------------------------- acceptance summary

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    key = marker
    prev = _outcomes.get(key, "PASS")
    if report.failed:
        _outcomes[key] = "FAIL"
    elif report.skipped and report.when in ("setup", "call"):
        if prev != "FAIL":
            _outcomes[key] = "SKIP"
    elif report.when == "call" and key not in _outcomes:
        _outcomes[key] = "PASS"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_outcomes.items()):
        terminalreporter.write_line(f"criterion {number}: {status:<4}  {title}")
