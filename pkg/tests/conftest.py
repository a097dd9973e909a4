import warnings
from dataclasses import replace

import pytest
import torch

from domainstyle.config import default_config
from domainstyle.data import make_shapes_dataset, scan_dataset

torch.set_num_threads(1)
warnings.filterwarnings("ignore", category=UserWarning, module="torch")


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    return make_shapes_dataset(tmp_path_factory.mktemp("shapes"), num_domains=3, per_domain=24, size=32, seed=0)


@pytest.fixture(scope="session")
def shapes_ds(shapes_root):
    return scan_dataset(shapes_root, test_fraction=0.25, image_size=32)


@pytest.fixture(scope="session")
def two_domain_root(tmp_path_factory):
    # 6 test images per domain at test_fraction 0.25
    return make_shapes_dataset(tmp_path_factory.mktemp("two"), num_domains=2, per_domain=24, size=32, seed=1)


@pytest.fixture(scope="session")
def two_domain_ds(two_domain_root):
    return scan_dataset(two_domain_root, test_fraction=0.25, image_size=32)


@pytest.fixture
def toy_cfg():
    return default_config("toy")


@pytest.fixture
def tiny_cfg():
    """Toy preset with a narrow mapping network, for fast unit tests."""
    return replace(default_config("toy"), hidden_dim=32, batch_size=2, total_iters=20, ds_decay_iters=20)


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for key in ("passed", "failed", "error")
        for report in terminalreporter.stats.get(key, [])
        for name, value in getattr(report, "user_properties", [])
        if name == "criterion"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines), key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
