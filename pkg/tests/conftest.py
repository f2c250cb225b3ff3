from pathlib import Path

import pytest
import torch

from aquaseg.decoder import DecoderConfig
from aquaseg.encoder import EncoderSpec
from aquaseg.pipeline import build_pipeline
from aquaseg.synth import generate_synthetic_dataset

torch.set_num_threads(1)

TOY_SIDE = 256
TOY_DIM = 32


def toy_decoder_config(seed: int = 7, num_mask_tokens: int = 1) -> DecoderConfig:
    return DecoderConfig(
        embed_dim=TOY_DIM, num_heads=4, mlp_width=128,
        num_mask_tokens=num_mask_tokens, seed=seed,
    )


def toy_encoder_spec(seed: int = 3) -> EncoderSpec:
    return EncoderSpec("toy", TOY_DIM, TOY_SIDE, seed=seed)


@pytest.fixture()
def toy_pipeline():
    return build_pipeline(toy_encoder_spec(), toy_decoder_config(), prompt_seed=5)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory) -> Path:
    """A deterministic 10-image synthetic dataset shared across tests."""
    root = tmp_path_factory.mktemp("data") / "synth"
    generate_synthetic_dataset(root, n_images=10, seed=99)
    return root
