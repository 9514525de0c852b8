from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from proactive_hri.codebook import ActionCodebook, MultiModalAction  # noqa: E402
from proactive_hri.model import ModelConfig  # noqa: E402
from proactive_hri.sim import SimConfig, generate_dataset  # noqa: E402
from proactive_hri.trainer import TrainConfig, run_training  # noqa: E402


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(m=4, n=3, feature_dim=8, d_model=16, k=5, heads=4)


@pytest.fixture
def five_actions() -> ActionCodebook:
    return ActionCodebook([MultiModalAction(f"say number {i}", i + 1, i + 1) for i in range(5)])


SMALL_MODEL = dict(m=8, d_model=32, blocks=2, heads=4)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(SimConfig(seed=3), 40, out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def small_run(small_dataset):
    torch.set_num_threads(1)
    return run_training(small_dataset, ModelConfig(**SMALL_MODEL), TrainConfig(steps=80, batch_size=16, warmup=10))


# one line per acceptance criterion, filled in by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
