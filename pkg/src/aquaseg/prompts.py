"""Box prompts: tight boxes from masks, training perturbation, Fourier encoding.

A box is two pixel-space corners; its prompt form is two tokens built from a
random (frozen) Fourier feature map of the normalized corner coordinates plus
a per-corner type embedding.  The whole prompt encoder is frozen: its
parameters are never updated during fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box with exclusive max coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValidationError(f"negative box coordinates {self}")

    def corners(self) -> np.ndarray:
        """Top-left and bottom-right corners as a 2 x 2 float array."""
        return np.array(
            [[self.x_min, self.y_min], [self.x_max, self.y_max]], dtype=np.float64
        )


def tight_box(mask: np.ndarray) -> BoundingBox:
    """Smallest box containing all foreground pixels of a binary mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValidationError(
            "cannot derive a box from an empty mask; the pixel-count exclusion "
            "rule must run before box prompting"
        )
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def perturb_box(
    box: BoundingBox,
    max_offset: int,
    bounds: tuple[int, int],
    rng: np.random.Generator,
    outward_only: bool = True,
) -> BoundingBox:
    """Randomly jitter a box by 0..max_offset pixels per coordinate.

    In the default outward mode each coordinate moves away from the box center
    by an independent uniform integer draw, so the result always contains the
    input.  The signed mode (for ablation) draws from -max_offset..max_offset
    instead and re-sorts/clamps to keep the box valid.  Draw order is fixed:
    (x_min, y_min, x_max, y_max).
    """
    if max_offset < 0:
        raise ValidationError(f"max_offset must be >= 0, got {max_offset}")
    h, w = bounds
    if box.x_max > w or box.y_max > h:
        raise ValidationError(f"box {box} exceeds bounds {bounds}")
    if max_offset == 0:
        return box

    if outward_only:
        d = rng.integers(0, max_offset + 1, size=4)
        return BoundingBox(
            max(box.x_min - int(d[0]), 0),
            max(box.y_min - int(d[1]), 0),
            min(box.x_max + int(d[2]), w),
            min(box.y_max + int(d[3]), h),
        )

    d = rng.integers(-max_offset, max_offset + 1, size=4)
    x0, x1 = sorted((box.x_min + int(d[0]), box.x_max + int(d[2])))
    y0, y1 = sorted((box.y_min + int(d[1]), box.y_max + int(d[3])))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x0 >= x1:  # degenerate after clamping: keep a 1-px extent inside bounds
        x0, x1 = (x1 - 1, x1) if x1 >= 1 else (0, 1)
    if y0 >= y1:
        y0, y1 = (y1 - 1, y1) if y1 >= 1 else (0, 1)
    return BoundingBox(x0, y0, x1, y1)


def fourier_features(points01: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Map N x 2 coordinates in [0, 1]^2 through [sin(2*pi*p@F), cos(2*pi*p@F)]."""
    proj = 2.0 * np.pi * (points01 @ matrix)  # N x num_frequencies
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


class BoxPromptEncoder(nn.Module):
    """Frozen encoder turning a bounding box into two prompt tokens.

    Holds the seeded Gaussian frequency matrix (2 x num_frequencies) and the
    two corner-type embeddings.  With the default num_frequencies = C/2 the
    raw Fourier vector is already C wide; otherwise it is zero-padded or
    truncated to C.  Also provides the dense positional grid the decoder
    re-adds at every cross-attention.
    """

    def __init__(
        self,
        embed_dim: int,
        num_frequencies: int | None = None,
        scale: float = 1.0,
        seed: int = 0,
    ):
        super().__init__()
        if embed_dim < 2:
            raise ValidationError(f"embed_dim must be >= 2, got {embed_dim}")
        self.embed_dim = embed_dim
        self.num_frequencies = num_frequencies if num_frequencies is not None else embed_dim // 2
        if self.num_frequencies < 1:
            raise ValidationError(f"num_frequencies must be >= 1, got {self.num_frequencies}")
        self.seed = seed

        gen = torch.Generator().manual_seed(seed)
        matrix = scale * torch.normal(0.0, 1.0, (2, self.num_frequencies), generator=gen)
        corners = torch.normal(0.0, 1.0, (2, embed_dim), generator=gen)
        # Frozen by construction: registered as parameters so the freeze
        # contract can be audited, but gradients are disabled permanently.
        self.frequency_matrix = nn.Parameter(matrix, requires_grad=False)
        self.corner_embeddings = nn.Parameter(corners, requires_grad=False)

    def _encode_points01(self, points01: np.ndarray) -> torch.Tensor:
        feats = fourier_features(points01, self.frequency_matrix.detach().cpu().numpy().astype(np.float64))
        width = feats.shape[-1]
        if width > self.embed_dim:
            feats = feats[..., : self.embed_dim]
        elif width < self.embed_dim:
            pad = np.zeros((*feats.shape[:-1], self.embed_dim - width), dtype=feats.dtype)
            feats = np.concatenate([feats, pad], axis=-1)
        return torch.from_numpy(feats.astype(np.float32))

    def encode_box(self, box: BoundingBox, image_side: int) -> torch.Tensor:
        """Encode a box in ``image_side``-space as 2 x C prompt tokens."""
        if box.x_max > image_side or box.y_max > image_side:
            raise ValidationError(f"box {box} outside [0, {image_side}] coordinate space")
        corners = (box.corners() + 0.5) / float(image_side)
        tokens = self._encode_points01(corners)
        return tokens + self.corner_embeddings.detach().to(tokens.dtype)

    def dense_grid(self, height: int, width: int) -> torch.Tensor:
        """Positional encoding of embedding-grid cell centers, C x H x W."""
        ys = (np.arange(height, dtype=np.float64) + 0.5) / height
        xs = (np.arange(width, dtype=np.float64) + 0.5) / width
        grid = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1).reshape(-1, 2)
        feats = self._encode_points01(grid)  # (H*W) x C
        return feats.reshape(height, width, self.embed_dim).permute(2, 0, 1)
