import numpy as np
import pytest
import torch

from ccda.datagen import DomainShiftSpec, SceneSpec, generate_pair
from ccda.trainer import TrainConfig

torch.set_num_threads(1)


def rand_probs(rng, B, C, H, W, scale=1.5):
    z = rng.normal(size=(B, C, H, W)) * scale
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def rand_labels(rng, B, C, H, W, ignore_frac=0.0):
    y = rng.integers(0, C, size=(B, H, W))
    if ignore_frac:
        y = np.where(rng.random(size=y.shape) < ignore_frac, 255, y)
    return y


def t64(a):
    return torch.tensor(a, dtype=torch.float64)


@pytest.fixture(scope="session")
def tiny_pair():
    """Small paired datasets shared by trainer, eval and cli tests."""
    spec = SceneSpec(seed=3, shape_radius=(8, 16))
    shift = DomainShiftSpec(hue_rotation=20, contrast_scale=0.7, brightness_offset=-0.1)
    return generate_pair(spec, shift, 6, 3)


@pytest.fixture
def tiny_config():
    return TrainConfig(iterations=10, sgd_lr=0.01, seed=0,
                       disc_fine_channels=(8, 8, 8, 8, 1), disc_coarse_hidden=(8, 8))


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str = "") -> None:
    """Remember one acceptance verdict and echo it immediately."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
