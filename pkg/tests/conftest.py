import numpy as np
import pytest
import torch

from reactplan.predictor import Predictor
from reactplan.sim import observe, reset


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def intersection_world():
    """An intersection episode advanced 2 s with the ego holding still."""
    w = reset("intersection", seed=1)
    for _ in range(20):
        w.step(None)
    return w


@pytest.fixture(scope="session")
def scene(intersection_world):
    obs = observe(intersection_world)
    assert obs.neighbor_valid.sum() >= 3
    return obs


@pytest.fixture(scope="session")
def model():
    return Predictor(seed=3)


@pytest.fixture(scope="session")
def plain_model():
    return Predictor("no_interaction", seed=3)


def straight_plan(speed: float, horizon: int = 30, dt: float = 0.1) -> np.ndarray:
    t = np.arange(1, horizon + 1) * dt
    plan = np.zeros((horizon, 4))
    plan[:, 0] = speed * t
    plan[:, 3] = speed
    return plan


_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Print and remember one acceptance verdict line."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = (ok, line)
    print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k][1])
