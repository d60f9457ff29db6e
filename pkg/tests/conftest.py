"""Shared fixtures: one small generator family per test session.

Everything here is desk scale so the whole suite stays CPU friendly.
Seeds are fixed; every fixture is deterministic.
"""

import pytest
import torch

from ganinv import (
    AttentionConfig,
    EncoderSpec,
    GeneratorSpec,
    TinyBackbone,
    build_encoder,
    build_mapping,
    build_toy_generator,
    sample_latents,
    synthesize,
)


@pytest.fixture(scope="session")
def style_spec():
    return GeneratorSpec("style", 32, [8, 16, 32, 32], d_w=32, d_z=32)


@pytest.fixture(scope="session")
def style_gen(style_spec):
    return build_toy_generator(style_spec, seed=0)


@pytest.fixture(scope="session")
def style_mapping(style_spec):
    return build_mapping(style_spec, seed=0)


@pytest.fixture(scope="session")
def style_encoder(style_spec):
    return build_encoder(EncoderSpec.from_generator(style_spec), seed=1)


@pytest.fixture(scope="session")
def backbone():
    return TinyBackbone(seed=0)


@pytest.fixture(scope="session")
def centre_config():
    return AttentionConfig(mode="centre")


@pytest.fixture(scope="session")
def image_pair(style_spec, style_gen, style_mapping):
    """Two distinct 4-image batches from the frozen toy generator."""
    a = sample_latents(style_spec, 4, seed=11, mapping=style_mapping)
    b = sample_latents(style_spec, 4, seed=12, mapping=style_mapping)
    with torch.no_grad():
        xa, _ = synthesize(style_gen, a)
        xb, _ = synthesize(style_gen, b)
    return xa, xb
