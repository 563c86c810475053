import numpy as np
import pytest

from defolab.datastore import ToyGrammar, generate_toy_dataset
from defolab.encoders import EncoderConfig, init_pack

# small enough that a full forward pass costs well under a millisecond
TINY = EncoderConfig(image_width=16, image_height=16, patch_size=8, latent_dim=16, embed_dim=8,
                     text_len=8, depth_v=1, depth_t=1, heads=2)


@pytest.fixture(scope="session")
def pack():
    return init_pack(EncoderConfig(), seed=0).freeze()


@pytest.fixture(scope="session")
def tiny_pack():
    return init_pack(TINY, seed=0).freeze()


@pytest.fixture(scope="session")
def toy_train():
    return generate_toy_dataset(ToyGrammar(), 120, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
