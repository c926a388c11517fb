import numpy as np
import pytest
import torch

from zsad.config import RunConfig
from zsad.data import gen_synthetic, load_samples
from zsad.model import ZeroShotDetector

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cfg() -> RunConfig:
    return RunConfig().replace(**{"encoder.image_size": 16})


@pytest.fixture()
def small_model(small_cfg) -> ZeroShotDetector:
    return ZeroShotDetector(small_cfg)


@pytest.fixture(scope="session")
def squares32(tmp_path_factory):
    root = tmp_path_factory.mktemp("squares32")
    return gen_synthetic("squares", 2, 2, 32, 0, root)


@pytest.fixture(scope="session")
def disks32(tmp_path_factory):
    root = tmp_path_factory.mktemp("disks32")
    return gen_synthetic("disks", 2, 2, 32, 1, root)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def abnormal_sample(manifest):
    return next(s for s in load_samples(manifest) if s.label == 1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
