"""Shared miniature fixtures: 8x8 images, Z=4, T=8."""

import numpy as np
import pytest
import torch

from txt2im.dataset import make_synthetic_dataset
from txt2im.gan_core import GANConfig, init_params
from txt2im.text_encoder import EncoderConfig, JointEmbedding

torch.set_num_threads(1)


@pytest.fixture
def mini_gan_config():
    return GANConfig(z_dim=4, text_dim=8, cond_dim=4, resolution=8, base_channels=4)


@pytest.fixture
def mini_encoder_config():
    return EncoderConfig(
        embed_dim=8,
        max_len=40,
        conv_channels=(8, 8),
        pool=2,
        rnn_hidden=8,
        resolution=8,
        image_channels=(4, 8),
        batch_size=8,
        epochs=2,
    )


@pytest.fixture
def mini_encoder(mini_encoder_config):
    torch.manual_seed(0)
    return JointEmbedding(mini_encoder_config).eval()


@pytest.fixture
def mini_dataset():
    return make_synthetic_dataset(4, 4, 8, seed=0)


@pytest.fixture
def mini_nets(mini_gan_config):
    return init_params(mini_gan_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
