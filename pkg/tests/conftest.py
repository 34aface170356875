import numpy as np
import pytest

from fanet.model import AblationConfig, BackboneConfig, init_params

TINY_BACKBONE = BackboneConfig(stem_channels=8, branch_channels=(8, 16), tem_channels=(16, 8))
TINY_INPUT = (3, 64, 24)  # stride 8 -> 8x3 feature map, enough rows for HPP


def tiny_params(config: AblationConfig | None = None, seed: int = 0, dtype=np.float32, n_persons=4, n_cameras=3):
    config = config or AblationConfig(k=4, embed_dim=8)
    return init_params(n_persons, n_cameras, config, TINY_BACKBONE, seed=seed, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance lines

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
