import numpy as np
import pytest
import torch

from aquaseg.errors import ValidationError
from aquaseg.prompts import (
    BoundingBox,
    BoxPromptEncoder,
    fourier_features,
    perturb_box,
    tight_box,
)


class FixedRng:
    """Stub rng returning predetermined integer draws."""

    def __init__(self, values):
        self.values = np.asarray(values)

    def integers(self, low, high, size):
        assert size == len(self.values)
        return self.values


class TestTightBox:
    def test_rows_3_to_5_cols_10_to_20(self):
        mask = np.zeros((10, 30), dtype=np.uint8)
        mask[3:6, 10:21] = 1
        assert tight_box(mask) == BoundingBox(10, 3, 21, 6)

    def test_single_pixel(self):
        mask = np.zeros((12, 12), dtype=np.uint8)
        mask[7, 9] = 1
        assert tight_box(mask) == BoundingBox(9, 7, 10, 8)

    def test_full_frame(self):
        assert tight_box(np.ones((64, 64), np.uint8)) == BoundingBox(0, 0, 64, 64)

    def test_empty_mask_errors(self):
        with pytest.raises(ValidationError, match="empty mask"):
            tight_box(np.zeros((8, 8), np.uint8))

    def test_invariant_under_identity_resize(self):
        from aquaseg.dataset import resize_mask

        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[10:30, 20:50] = 1
        assert tight_box(resize_mask(mask, 64)) == tight_box(mask)


class TestPerturbBox:
    def test_zero_offset_is_identity(self):
        box = BoundingBox(10, 10, 20, 20)
        rng = np.random.default_rng(0)
        assert perturb_box(box, 0, (1024, 1024), rng) == box

    def test_outward_rule_by_hand(self):
        # draws applied in (x_min, y_min, x_max, y_max) order, all outward
        box = BoundingBox(10, 10, 20, 20)
        out = perturb_box(box, 20, (1024, 1024), FixedRng([5, 3, 7, 2]))
        assert out == BoundingBox(5, 7, 27, 22)

    def test_full_frame_saturates(self):
        box = BoundingBox(0, 0, 1024, 1024)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            assert perturb_box(box, 20, (1024, 1024), rng) == box

    def test_containment_over_many_draws(self):
        rng = np.random.default_rng(7)
        box = BoundingBox(100, 120, 260, 300)
        for _ in range(500):
            out = perturb_box(box, 20, (1024, 1024), rng)
            assert out.x_min <= box.x_min and out.y_min <= box.y_min
            assert out.x_max >= box.x_max and out.y_max >= box.y_max

    def test_signed_mode_stays_valid(self):
        rng = np.random.default_rng(11)
        box = BoundingBox(5, 5, 30, 30)
        for _ in range(500):
            out = perturb_box(box, 20, (64, 64), rng, outward_only=False)
            assert 0 <= out.x_min < out.x_max <= 64
            assert 0 <= out.y_min < out.y_max <= 64

    def test_offset_distribution_is_uniform(self):
        # smaller-sample version of the acceptance check
        rng = np.random.default_rng(13)
        box = BoundingBox(100, 100, 200, 200)
        draws = np.array(
            [
                [
                    box.x_min - out.x_min, box.y_min - out.y_min,
                    out.x_max - box.x_max, out.y_max - box.y_max,
                ]
                for out in (perturb_box(box, 20, (1024, 1024), rng) for _ in range(2000))
            ]
        )
        assert abs(draws.mean() - 10.0) < 0.5
        for coord in range(4):
            counts = np.bincount(draws[:, coord], minlength=21)
            assert counts.min() > 0


class TestBoxEncoding:
    def test_output_shape_is_2xC(self):
        enc = BoxPromptEncoder(embed_dim=32, seed=4)
        tokens = enc.encode_box(BoundingBox(10, 20, 100, 200), 256)
        assert tokens.shape == (2, 32)

    def test_deterministic_across_instances(self):
        a = BoxPromptEncoder(embed_dim=32, seed=4)
        b = BoxPromptEncoder(embed_dim=32, seed=4)
        box = BoundingBox(3, 5, 60, 70)
        assert torch.equal(a.encode_box(box, 256), b.encode_box(box, 256))
        c = BoxPromptEncoder(embed_dim=32, seed=5)
        assert not torch.equal(a.encode_box(box, 256), c.encode_box(box, 256))

    def test_corner_normalization_hand_computed(self):
        # corners of the full box normalize to ~0 and ~1: (0+0.5)/S and (S+0.5)/S
        side = 1024
        enc = BoxPromptEncoder(embed_dim=32, seed=4)
        tokens = enc.encode_box(BoundingBox(0, 0, side, side), side)

        matrix = enc.frequency_matrix.detach().numpy().astype(np.float64)
        lo, hi = 0.5 / side, (side + 0.5) / side
        assert lo == pytest.approx(0.0, abs=1e-3) and hi == pytest.approx(1.0, abs=1e-3)
        expected = fourier_features(np.array([[lo, lo], [hi, hi]]), matrix).astype(np.float32)
        expected = torch.from_numpy(expected) + enc.corner_embeddings.detach()
        assert torch.equal(tokens, expected)

    def test_num_frequencies_default_fills_width(self):
        enc = BoxPromptEncoder(embed_dim=64, seed=1)
        assert enc.num_frequencies == 32
        tokens = enc.encode_box(BoundingBox(0, 0, 8, 8), 64)
        assert tokens.shape == (2, 64)

    def test_padding_and_truncation(self):
        narrow = BoxPromptEncoder(embed_dim=64, num_frequencies=8, seed=1)
        tokens = narrow.encode_box(BoundingBox(0, 0, 8, 8), 64)
        assert tokens.shape == (2, 64)
        # beyond 2*num_frequencies the fourier part is zero padding
        raw = tokens - narrow.corner_embeddings.detach()
        assert torch.all(raw[:, 16:] == 0)

        wide = BoxPromptEncoder(embed_dim=16, num_frequencies=32, seed=1)
        assert wide.encode_box(BoundingBox(0, 0, 8, 8), 64).shape == (2, 16)

    def test_dense_grid_shape_and_determinism(self):
        enc = BoxPromptEncoder(embed_dim=32, seed=4)
        grid = enc.dense_grid(16, 16)
        assert grid.shape == (32, 16, 16)
        assert torch.equal(grid, BoxPromptEncoder(embed_dim=32, seed=4).dense_grid(16, 16))

    def test_box_outside_side_rejected(self):
        enc = BoxPromptEncoder(embed_dim=32, seed=4)
        with pytest.raises(ValidationError, match="outside"):
            enc.encode_box(BoundingBox(0, 0, 300, 300), 256)

    def test_frozen_parameters(self):
        enc = BoxPromptEncoder(embed_dim=32, seed=4)
        assert all(not p.requires_grad for p in enc.parameters())
        assert len(list(enc.parameters())) == 2
