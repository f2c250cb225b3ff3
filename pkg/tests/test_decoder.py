import struct
import zlib

import numpy as np
import pytest
import torch

from aquaseg.decoder import (
    CHECKPOINT_MAGIC,
    DecoderConfig,
    MaskDecoder,
    MaskLogits,
    binarize,
    decode,
    init_decoder,
    load_checkpoint,
    save_checkpoint,
    upsample_logits,
)
from aquaseg.errors import CacheCorruptError, DivergenceError, ValidationError
from aquaseg.prompts import BoxPromptEncoder

from conftest import toy_decoder_config


def expected_parameter_count(c: int, w: int, m: int) -> int:
    """Closed-form count for the documented architecture."""
    attn_full = 4 * c * c + 4 * c  # q,k,v,out at full width
    attn_half = 2 * c * c + 5 * c // 2  # cross-attention at half width
    norm = 2 * c
    block = attn_full + norm + attn_half + norm + (2 * c * w + w + c) + norm + attn_half + norm
    transformer = 2 * block + attn_half + norm
    upscale = (c * c + c // 4) + (c // 2) + (c * c // 8 + c // 8)
    mask_mlps = m * (2 * (c * c + c) + c * (c // 8) + c // 8)
    iou_head = 2 * (c * c + c) + c * m + m
    tokens = c + m * c
    return tokens + transformer + upscale + mask_mlps + iou_head


def _toy_inputs(c=32, h=16, w=16, seed=0, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    emb = torch.from_numpy(rng.normal(size=(1, c, h, w))).to(dtype)
    pe = torch.from_numpy(rng.normal(size=(c, h, w))).to(dtype)
    tokens = torch.from_numpy(rng.normal(size=(1, 2, c))).to(dtype)
    return emb, pe, tokens


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_decoder(toy_decoder_config(seed=5))
        b = init_decoder(toy_decoder_config(seed=5))
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name
        c = init_decoder(toy_decoder_config(seed=6))
        assert any(
            not torch.equal(pa, pc)
            for pa, pc in zip(a.state_dict().values(), c.state_dict().values())
        )

    def test_parameter_count_closed_form(self):
        for c, w, m, heads in [(32, 128, 1, 4), (32, 256, 3, 4), (64, 512, 1, 8)]:
            decoder = MaskDecoder(DecoderConfig(c, heads, w, m, seed=0))
            assert decoder.parameter_count() == expected_parameter_count(c, w, m)

    def test_mask_token_table_differs_by_2c(self):
        one = MaskDecoder(DecoderConfig(32, 4, 128, 1, seed=0))
        three = MaskDecoder(DecoderConfig(32, 4, 128, 3, seed=0))
        delta = three.mask_tokens.weight.numel() - one.mask_tokens.weight.numel()
        assert delta == 2 * 32

    def test_all_params_finite(self):
        decoder = init_decoder(toy_decoder_config())
        assert all(torch.isfinite(p).all() for p in decoder.parameters())

    def test_heads_must_divide_embed_dim(self):
        with pytest.raises(ValidationError, match="divisible"):
            DecoderConfig(embed_dim=32, num_heads=5, mlp_width=64)


class TestDecode:
    def test_toy_shape_law(self):
        decoder = init_decoder(toy_decoder_config())
        emb, pe, tokens = _toy_inputs()
        masks, iou_pred = decoder(emb, pe, tokens)
        assert masks.shape == (1, 1, 64, 64)
        assert iou_pred.shape == (1, 1)

    def test_full_scale_shape_law(self):
        decoder = MaskDecoder(DecoderConfig(256, 8, 2048, 1, seed=0))
        emb, pe, tokens = _toy_inputs(c=256, h=64, w=64)
        masks, _ = decoder(emb, pe, tokens)
        assert masks.shape == (1, 1, 256, 256)

    def test_pure_function(self):
        decoder = init_decoder(toy_decoder_config())
        emb, pe, tokens = _toy_inputs(seed=3)
        a, ia = decoder(emb, pe, tokens)
        b, ib = decoder(emb, pe, tokens)
        assert torch.equal(a, b) and torch.equal(ia, ib)

    def test_single_mask_contract(self):
        decoder = init_decoder(toy_decoder_config())
        prompt_enc = BoxPromptEncoder(32, seed=5)
        from aquaseg.prompts import BoundingBox

        logits = decode(
            np.random.default_rng(0).normal(size=(32, 16, 16)).astype(np.float32),
            prompt_enc.encode_box(BoundingBox(10, 10, 100, 100), 256),
            decoder,
            prompt_enc.dense_grid(16, 16),
        )
        assert isinstance(logits, MaskLogits)
        assert logits.grid.shape == (64, 64)
        assert isinstance(logits.predicted_iou, float)

    def test_multi_token_mode_emits_three(self):
        decoder = MaskDecoder(DecoderConfig(32, 4, 128, 3, seed=0))
        emb, pe, tokens = _toy_inputs()
        masks, iou_pred = decoder(emb, pe, tokens)
        assert masks.shape[1] == 3 and iou_pred.shape[1] == 3

    def test_embed_dim_mismatch(self):
        decoder = init_decoder(toy_decoder_config())
        emb, pe, tokens = _toy_inputs(c=64, h=8, w=8)
        with pytest.raises(ValidationError, match="embed_dim"):
            decoder(emb, pe[:32], tokens[:, :, :32])

    def test_nan_input_names_stage(self):
        decoder = init_decoder(toy_decoder_config())
        emb, pe, tokens = _toy_inputs()
        emb[0, 0, 0, 0] = float("nan")
        with pytest.raises(DivergenceError, match="inputs"):
            decoder(emb, pe, tokens)

    def test_diverged_weights_name_stage(self):
        decoder = init_decoder(toy_decoder_config())
        with torch.no_grad():
            decoder.transformer.blocks[0].mlp[0].weight.fill_(float("inf"))
        emb, pe, tokens = _toy_inputs()
        with pytest.raises(DivergenceError, match="transformer"):
            decoder(emb, pe, tokens)


class TestGradientCheck:
    def test_parameter_group_gradients_match_finite_differences(self):
        """Autograd gradients vs central differences, per parameter group,
        in 64-bit arithmetic."""
        config = DecoderConfig(32, 4, 64, 1, seed=11)
        decoder = MaskDecoder(config).double()
        emb, pe, tokens = _toy_inputs(c=32, h=8, w=8, seed=7, dtype=torch.float64)
        rng = np.random.default_rng(23)
        mask_weight = torch.from_numpy(rng.normal(size=(1, 1, 32, 32))).double()
        iou_weight = torch.from_numpy(rng.normal(size=(1, 1))).double()

        def loss_fn() -> torch.Tensor:
            masks, iou_pred = decoder(emb, pe, tokens)
            return (masks * mask_weight).sum() + (iou_pred * iou_weight).sum()

        loss = loss_fn()
        decoder.zero_grad()
        loss.backward()

        h = 1e-5
        failures = []
        for name, param in decoder.named_parameters():
            assert param.grad is not None, name
            flat = param.detach().reshape(-1)
            grad = param.grad.reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                original = flat[idx].item()
                step = h * max(1.0, abs(original))
                with torch.no_grad():
                    flat[idx] = original + step
                    up = loss_fn().item()
                    flat[idx] = original - step
                    down = loss_fn().item()
                    flat[idx] = original
                fd = (up - down) / (2 * step)
                analytic = grad[idx].item()
                scale = max(abs(analytic), abs(fd))
                if scale < 1e-6:
                    # structurally zero direction (e.g. key biases cancel in
                    # softmax); below central-difference noise, counts as match
                    continue
                rel = abs(analytic - fd) / scale
                if rel >= 1e-3:
                    failures.append((name, int(idx), analytic, fd, rel))
        assert not failures, failures


class TestUpsampleBinarize:
    def test_identity_when_sizes_match(self):
        grid = np.random.default_rng(0).normal(size=(64, 64)).astype(np.float32)
        np.testing.assert_array_equal(upsample_logits(grid, (64, 64)), grid)

    def test_shape_contract(self):
        grid = np.zeros((256, 256), dtype=np.float32)
        assert upsample_logits(grid, (512, 512)).shape == (512, 512)

    def test_constant_preserved(self):
        grid = np.full((16, 16), 2.5, dtype=np.float32)
        out = upsample_logits(grid, (100, 40))
        np.testing.assert_allclose(out, 2.5, rtol=1e-6)

    def test_maps_through_encoder_space(self):
        logits = MaskLogits(np.random.default_rng(1).normal(size=(64, 64)).astype(np.float32), 0.5)
        assert upsample_logits(logits, (123, 77)).shape == (123, 77)

    def test_binarize_all_negative(self):
        assert binarize(np.full((4, 4), -1.0)).sum() == 0

    def test_binarize_all_positive(self):
        assert binarize(np.full((4, 4), 1.0)).sum() == 16

    def test_binarize_zero_is_background(self):
        assert binarize(np.zeros((4, 4))).sum() == 0  # strict inequality


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        decoder = init_decoder(toy_decoder_config(seed=3))
        meta = {"step": 17, "note": "x"}
        path = save_checkpoint(tmp_path / "d.ckpt", decoder, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        assert loaded.config == decoder.config
        for (name, a), (_, b) in zip(
            sorted(decoder.state_dict().items()), sorted(loaded.state_dict().items())
        ):
            assert torch.equal(a, b), name

    def test_truncation_detected(self, tmp_path):
        decoder = init_decoder(toy_decoder_config())
        path = save_checkpoint(tmp_path / "d.ckpt", decoder)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(CacheCorruptError):
            load_checkpoint(path)

    def test_flipped_byte_detected(self, tmp_path):
        decoder = init_decoder(toy_decoder_config())
        path = save_checkpoint(tmp_path / "d.ckpt", decoder)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CacheCorruptError, match="CRC32"):
            load_checkpoint(path)

    def test_shape_mismatch_named(self, tmp_path):
        decoder = init_decoder(toy_decoder_config())
        path = save_checkpoint(tmp_path / "d.ckpt", decoder)
        blob = path.read_bytes()
        head = len(CHECKPOINT_MAGIC) + 2
        body = bytearray(blob[head:-4])
        # first stored parameter is the first name alphabetically; find its
        # shape header and inflate one dimension, then re-seal the CRC
        first_name = sorted(decoder.state_dict())[0].encode()
        name_at = bytes(body).index(first_name)
        dims_at = name_at + len(first_name) + 4  # skip ndim field
        (dim0,) = struct.unpack_from("<I", body, dims_at)
        struct.pack_into("<I", body, dims_at, dim0 + 1)
        sealed = blob[:head] + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
        path.write_bytes(sealed)
        with pytest.raises(CacheCorruptError, match="shape"):
            load_checkpoint(path)
