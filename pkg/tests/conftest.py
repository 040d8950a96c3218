from __future__ import annotations

import numpy as np
import pytest

from src.equidesc.config import DecoderConfig, EncoderConfig, SupportSpec, load_preset
from src.equidesc.network import init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_support():
    return SupportSpec(radius=0.3, shells=2, bandwidth=2)


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(layer_bandwidths=[(2, 2), (2, 2)], channels=[3, 1], input_shells=2)


@pytest.fixture
def tiny_decoder():
    return DecoderConfig(hidden=[8, 8, 8], grid_size=16)


@pytest.fixture
def tiny_weights(tiny_support, tiny_encoder, tiny_decoder, rng):
    return init_weights(tiny_support, tiny_encoder, tiny_decoder, rng)


@pytest.fixture(scope="session")
def desk_preset():
    return load_preset("desk")


@pytest.fixture
def desk_support(desk_preset):
    return desk_preset.support


@pytest.fixture
def desk_encoder(desk_preset):
    return desk_preset.encoder


@pytest.fixture
def desk_decoder(desk_preset):
    return desk_preset.decoder


@pytest.fixture
def desk_weights(desk_support, desk_encoder, desk_decoder):
    return init_weights(desk_support, desk_encoder, desk_decoder, np.random.default_rng(7))
