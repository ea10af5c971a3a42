import numpy as np
import pytest

from rdvit.model import RDViTConfig, build
from rdvit.rng import RngState, derive_seed


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> RDViTConfig:
    """A model small enough that every test forward stays sub-second."""
    base = dict(
        image_size=(16, 16),
        patch_size=4,
        dim=24,
        heads=2,
        loops=3,
        prelude_layers=1,
        coda_layers=1,
        lora_rank=2,
        dropout=0.0,
        drop_path=0.0,
        seg_head_channels=8,
        num_classes=4,
    )
    base.update(overrides)
    return RDViTConfig(**base)


def tiny_model(seed: int = 5, variant: str = "custom", **overrides):
    return build(tiny_config(**overrides), variant, RngState(derive_seed(seed, "init")))


@pytest.fixture
def model():
    return tiny_model()


# One line per acceptance criterion, echoed after the run so the verdicts
# survive pytest's output capture.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
