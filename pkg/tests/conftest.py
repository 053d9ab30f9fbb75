import numpy as np
import pytest

from lorac.checkpoint import save_full_checkpoint
from lorac.data import ScenarioSpec, source_task, target_task
from lorac.model import build_backbone, load_model_config
from lorac.train import TrainConfig, pretrain

# Desk scenario shared by the training-heavy tests.
SCENARIO = ScenarioSpec()
PRETRAIN = TrainConfig(epochs=8, batch_size=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def source():
    return source_task(SCENARIO)


@pytest.fixture(scope="session")
def target():
    return target_task(SCENARIO)


def _pretrained(tmp_path_factory, preset, source):
    net = build_backbone(load_model_config(preset))
    pretrain(net, source[0], {"clean": source[1]}, PRETRAIN)
    path = tmp_path_factory.mktemp("base") / f"{preset}.lrcf"
    save_full_checkpoint(net, path)
    return path


@pytest.fixture(scope="session")
def base_ckpt(tmp_path_factory, source):
    """resnet8 trained on the clean source task."""
    return _pretrained(tmp_path_factory, "resnet8", source)


@pytest.fixture(scope="session")
def narrow_ckpt(tmp_path_factory, source):
    return _pretrained(tmp_path_factory, "resnet8-narrow", source)


# PASS/FAIL lines from tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
