"""Frozen image encoders producing C x (S/16) x (S/16) embedding grids.

The toy encoder is a deterministic stand-in with the right geometry for desk
scale work: a 16 x 16 patch projection followed by two seeded, untrained
channel-mixing layers with a bounded nonlinearity.  Embeddings from a real
pretrained backbone are brought in offline through
:func:`aquaseg.embed_cache.import_external_embeddings`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

PATCH_SIZE = 16


@dataclass
class ImageEmbedding:
    """One image's feature grid, C x H x W with H = W = input_side / 16."""

    image_id: str
    grid: np.ndarray  # float32, C x H x W
    embed_dim: int

    def __post_init__(self) -> None:
        if self.grid.ndim != 3 or self.grid.shape[0] != self.embed_dim:
            raise ValidationError(
                f"embedding {self.image_id!r}: grid shape {self.grid.shape} does not "
                f"match embed_dim {self.embed_dim}"
            )
        if not np.isfinite(self.grid).all():
            raise ValidationError(f"embedding {self.image_id!r} contains non-finite values")


@dataclass(frozen=True)
class EncoderSpec:
    """Which encoder produces embeddings and at what geometry."""

    kind: str = "toy"  # "toy" | "external"
    embed_dim: int = 32
    input_side: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("toy", "external"):
            raise ValidationError(f"encoder kind must be 'toy' or 'external', got {self.kind!r}")
        if self.input_side < PATCH_SIZE or self.input_side % PATCH_SIZE != 0:
            raise ValidationError(
                f"input_side must be a positive multiple of {PATCH_SIZE}, got {self.input_side}"
            )
        if self.embed_dim < 1:
            raise ValidationError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def grid_side(self) -> int:
        return self.input_side // PATCH_SIZE


class ToyImageEncoder(nn.Module):
    """Seeded random-feature encoder with SAM geometry; all parameters frozen."""

    def __init__(self, embed_dim: int, seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim
        self.seed = seed
        self.patch_proj = nn.Conv2d(3, embed_dim, kernel_size=PATCH_SIZE, stride=PATCH_SIZE)
        self.mix1 = nn.Conv2d(embed_dim, embed_dim, kernel_size=1)
        self.mix2 = nn.Conv2d(embed_dim, embed_dim, kernel_size=1)

        gen = torch.Generator().manual_seed(seed)
        for conv in (self.patch_proj, self.mix1, self.mix2):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            with torch.no_grad():
                conv.weight.copy_(
                    torch.normal(0.0, fan_in ** -0.5, conv.weight.shape, generator=gen)
                )
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.tanh(self.patch_proj(x))
        x = torch.tanh(self.mix1(x))
        return torch.tanh(self.mix2(x))


def build_toy_encoder(spec: EncoderSpec) -> ToyImageEncoder:
    if spec.kind != "toy":
        raise ValidationError(f"cannot build an in-process encoder of kind {spec.kind!r}")
    return ToyImageEncoder(spec.embed_dim, spec.seed)


def encode_image(
    normalized_image: np.ndarray,
    spec: EncoderSpec,
    encoder: ToyImageEncoder | None = None,
    image_id: str = "",
) -> ImageEmbedding:
    """Run the frozen encoder over a normalized 3 x S x S image.

    The external kind has no in-process backend: compute those embeddings
    offline and load them with import_external_embeddings (CLI: `aquaseg
    embed` with `encoder.kind: external`).
    """
    if spec.kind == "external":
        raise ValidationError(
            "encoder kind 'external' has no in-process backend; compute embeddings "
            "offline and load them with import_external_embeddings"
        )
    if normalized_image.ndim != 3 or normalized_image.shape[0] != 3:
        raise ValidationError(f"expected a 3 x S x S image, got shape {normalized_image.shape}")
    s = normalized_image.shape[1]
    if normalized_image.shape[2] != s or s % PATCH_SIZE != 0:
        raise ValidationError(
            f"image side must be square and divisible by {PATCH_SIZE}, got "
            f"{normalized_image.shape[1:]}"
        )

    model = encoder if encoder is not None else build_toy_encoder(spec)
    if model.embed_dim != spec.embed_dim:
        raise ValidationError(
            f"encoder embed_dim {model.embed_dim} does not match spec embed_dim {spec.embed_dim}"
        )
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(normalized_image, dtype=np.float32))
        grid = model(x.unsqueeze(0)).squeeze(0).numpy()
    return ImageEmbedding(image_id, np.ascontiguousarray(grid, dtype=np.float32), spec.embed_dim)
