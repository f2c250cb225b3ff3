import numpy as np
import pytest
import torch

from aquaseg.errors import ValidationError
from aquaseg.pipeline import build_pipeline, parameter_bytes, parameter_partition
from aquaseg.prompts import BoundingBox

from conftest import toy_decoder_config, toy_encoder_spec


class TestParameterPartition:
    def test_trainable_is_exactly_the_decoder(self, toy_pipeline):
        frozen, trainable = parameter_partition(toy_pipeline)
        decoder_names = {f"decoder.{n}" for n, _ in toy_pipeline.decoder.named_parameters()}
        assert set(trainable) == decoder_names
        assert all(name.startswith(("encoder.", "prompt_encoder.")) for name in frozen)
        assert not (set(frozen) & set(trainable))
        n_total = sum(
            1
            for module in (toy_pipeline.encoder, toy_pipeline.prompt_encoder, toy_pipeline.decoder)
            for _ in module.parameters()
        )
        assert len(frozen) + len(trainable) == n_total

    def test_prompt_encoder_members_frozen(self, toy_pipeline):
        frozen, _ = parameter_partition(toy_pipeline)
        assert "prompt_encoder.frequency_matrix" in frozen
        assert "prompt_encoder.corner_embeddings" in frozen

    def test_misflagged_parameter_detected(self, toy_pipeline):
        toy_pipeline.prompt_encoder.corner_embeddings.requires_grad_(True)
        with pytest.raises(ValidationError, match="corner_embeddings"):
            parameter_partition(toy_pipeline)

    def test_frozen_decoder_detected(self, toy_pipeline):
        for p in toy_pipeline.decoder.parameters():
            p.requires_grad_(False)
        with pytest.raises(ValidationError, match="frozen"):
            parameter_partition(toy_pipeline)

    def test_empty_trainable_set_detected(self, toy_pipeline):
        toy_pipeline.decoder = torch.nn.Module()  # no parameters at all
        with pytest.raises(ValidationError, match="empty"):
            parameter_partition(toy_pipeline)

    def test_parameter_bytes_stable(self, toy_pipeline):
        frozen, _ = parameter_partition(toy_pipeline)
        assert parameter_bytes(frozen) == parameter_bytes(frozen)


class TestPipeline:
    def test_embed_dim_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="embed_dim"):
            build_pipeline(toy_encoder_spec(), toy_decoder_config().__class__(
                embed_dim=64, num_heads=4, mlp_width=128, num_mask_tokens=1, seed=0
            ))

    def test_dense_pe_cached(self, toy_pipeline):
        a = toy_pipeline.dense_pe(16, 16)
        b = toy_pipeline.dense_pe(16, 16)
        assert a is b

    def test_predict_logits_shape(self, toy_pipeline):
        grid = np.random.default_rng(0).normal(size=(32, 16, 16)).astype(np.float32)
        logits = toy_pipeline.predict_logits(grid, BoundingBox(8, 8, 160, 160))
        assert logits.grid.shape == (64, 64)
