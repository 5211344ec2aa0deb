import numpy as np
import pytest

from qsep import model


def tiny_config() -> model.ModelConfig:
    # 32 x 8 network spectrogram; small enough for exhaustive-ish gradient checks
    return model.get_config(
        "desk",
        window=64,
        hop=16,
        segment_seconds=0.016,
        latent_dim=3,
        query_channels=(2, 2, 3, 3),
        query_time_strides=(1, 2, 1, 2),
        gru_units=3,
        sep_channels=(3, 4, 5),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny_cfg):
    return model.init_params(tiny_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, appended by test_acceptance and printed at the end
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
