"""The trainable mask decoder: two two-way transformer layers, a dynamic
mask head, and an IoU regression head, run in single-mask mode.

The layout follows the public SAM reference design so real checkpoints have a
structural counterpart: token self-attention, token-to-image and
image-to-token cross-attention (with positional terms re-added at each
cross-attention), a two-stage 4x transposed-convolution upscaler, per-token
hypernetwork MLPs dotted against the upscaled features, and an IoU MLP.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CacheCorruptError, DivergenceError, MissingArtifactError, ValidationError

CHECKPOINT_MAGIC = b"AQCKPT1"
CHECKPOINT_VERSION = 1
NUM_LAYERS = 2  # fixed two-transformer-layer design
MASK_DOWNSCALE = 4  # logits side = encoder input side / 4


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 256
    num_heads: int = 8
    mlp_width: int = 2048
    num_mask_tokens: int = 1  # 1 in single-mask mode, 3 in SAM-compatible mode
    seed: int = 0

    def __post_init__(self) -> None:
        c = self.embed_dim
        if c % self.num_heads != 0:
            raise ValidationError(
                f"embed_dim {c} must be divisible by num_heads {self.num_heads}"
            )
        if (c // 2) % self.num_heads != 0:
            raise ValidationError(
                f"embed_dim {c} must be divisible by 2*num_heads {2 * self.num_heads} "
                f"(cross-attention halves the channel width)"
            )
        if c % 8 != 0:
            raise ValidationError(f"embed_dim {c} must be divisible by 8 (upscaler channels)")
        if self.num_mask_tokens < 1:
            raise ValidationError(f"num_mask_tokens must be >= 1, got {self.num_mask_tokens}")
        if self.mlp_width < 1:
            raise ValidationError(f"mlp_width must be >= 1, got {self.mlp_width}")


@dataclass
class MaskLogits:
    """Single-mask decoder output: a (S/4) x (S/4) logit grid plus its
    predicted IoU."""

    grid: np.ndarray
    predicted_iou: float


class LayerNorm2d(nn.Module):
    """Channel-wise layer norm over B x C x H x W maps."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLP(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [output_dim])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        return x


class Attention(nn.Module):
    """Multi-head attention; cross-attention halves the internal width."""

    def __init__(self, embed_dim: int, num_heads: int, downsample_rate: int = 1):
        super().__init__()
        self.internal_dim = embed_dim // downsample_rate
        self.num_heads = num_heads
        self.q_proj = nn.Linear(embed_dim, self.internal_dim)
        self.k_proj = nn.Linear(embed_dim, self.internal_dim)
        self.v_proj = nn.Linear(embed_dim, self.internal_dim)
        self.out_proj = nn.Linear(self.internal_dim, embed_dim)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        q = self._split_heads(self.q_proj(q))
        k = self._split_heads(self.k_proj(k))
        v = self._split_heads(self.v_proj(v))
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)
        out = attn @ v
        b, h, n, d = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * d))


class TwoWayBlock(nn.Module):
    """One round of {token self-attn, token->image, token MLP, image->token}."""

    def __init__(self, embed_dim: int, num_heads: int, mlp_width: int, first_layer: bool):
        super().__init__()
        self.first_layer = first_layer
        self.self_attn = Attention(embed_dim, num_heads)
        self.norm1 = nn.LayerNorm(embed_dim)
        self.cross_token_to_image = Attention(embed_dim, num_heads, downsample_rate=2)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, mlp_width), nn.ReLU(), nn.Linear(mlp_width, embed_dim)
        )
        self.norm3 = nn.LayerNorm(embed_dim)
        self.cross_image_to_token = Attention(embed_dim, num_heads, downsample_rate=2)
        self.norm4 = nn.LayerNorm(embed_dim)

    def forward(
        self,
        tokens: torch.Tensor,
        image: torch.Tensor,
        token_pe: torch.Tensor,
        image_pe: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if self.first_layer:
            tokens = tokens + self.self_attn(tokens, tokens, tokens)
        else:
            q = tokens + token_pe
            tokens = tokens + self.self_attn(q, q, tokens)
        tokens = self.norm1(tokens)

        q, k = tokens + token_pe, image + image_pe
        tokens = self.norm2(tokens + self.cross_token_to_image(q, k, image))
        tokens = self.norm3(tokens + self.mlp(tokens))

        q, k = tokens + token_pe, image + image_pe
        image = self.norm4(image + self.cross_image_to_token(k, q, tokens))
        return tokens, image


class TwoWayTransformer(nn.Module):
    def __init__(self, embed_dim: int, num_heads: int, mlp_width: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            TwoWayBlock(embed_dim, num_heads, mlp_width, first_layer=(i == 0))
            for i in range(NUM_LAYERS)
        )
        self.final_token_to_image = Attention(embed_dim, num_heads, downsample_rate=2)
        self.norm_final = nn.LayerNorm(embed_dim)

    def forward(
        self, image: torch.Tensor, image_pe: torch.Tensor, tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """image: B x C x H x W; image_pe: same; tokens: B x N x C."""
        b, c, h, w = image.shape
        image = image.flatten(2).permute(0, 2, 1)
        image_pe = image_pe.flatten(2).permute(0, 2, 1)

        token_pe = tokens
        for block in self.blocks:
            tokens, image = block(tokens, image, token_pe, image_pe)

        q, k = tokens + token_pe, image + image_pe
        tokens = self.norm_final(tokens + self.final_token_to_image(q, k, image))
        return tokens, image.permute(0, 2, 1).reshape(b, c, h, w)


class MaskDecoder(nn.Module):
    """Maps (image embedding, box prompt tokens) to mask logits and an IoU score."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        c = config.embed_dim
        self.iou_token = nn.Embedding(1, c)
        self.mask_tokens = nn.Embedding(config.num_mask_tokens, c)
        self.transformer = TwoWayTransformer(c, config.num_heads, config.mlp_width)
        self.upscale_conv1 = nn.ConvTranspose2d(c, c // 4, kernel_size=2, stride=2)
        self.upscale_norm = LayerNorm2d(c // 4)
        self.upscale_conv2 = nn.ConvTranspose2d(c // 4, c // 8, kernel_size=2, stride=2)
        self.mask_mlps = nn.ModuleList(
            MLP(c, c, c // 8, 3) for _ in range(config.num_mask_tokens)
        )
        self.iou_head = MLP(c, c, config.num_mask_tokens, 3)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        """Deterministic seeded init: N(0, 1/sqrt(fan_in)) weights, zero biases,
        N(0, 1) token tables, unit norms."""
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for _, module in sorted(self.named_modules(), key=lambda kv: kv[0]):
                if isinstance(module, nn.Linear):
                    std = module.in_features ** -0.5
                    module.weight.copy_(
                        torch.normal(0.0, std, module.weight.shape, generator=gen)
                    )
                    module.bias.zero_()
                elif isinstance(module, nn.ConvTranspose2d):
                    fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                    module.weight.copy_(
                        torch.normal(0.0, fan_in ** -0.5, module.weight.shape, generator=gen)
                    )
                    module.bias.zero_()
                elif isinstance(module, nn.Embedding):
                    module.weight.copy_(
                        torch.normal(0.0, 1.0, module.weight.shape, generator=gen)
                    )
                elif isinstance(module, (nn.LayerNorm, LayerNorm2d)):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    @staticmethod
    def _check_finite(tensor: torch.Tensor, stage: str) -> None:
        if not torch.isfinite(tensor).all():
            raise DivergenceError(f"non-finite values in decoder stage {stage!r}")

    def forward(
        self,
        image_embedding: torch.Tensor,
        image_pe: torch.Tensor,
        prompt_tokens: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode a batch.

        image_embedding: B x C x H x W; image_pe: C x H x W (shared) or
        B x C x H x W; prompt_tokens: B x 2 x C.  Returns mask logits
        B x M x 4H x 4W and predicted IoU B x M.
        """
        b, c, h, w = image_embedding.shape
        if c != self.config.embed_dim:
            raise ValidationError(
                f"embedding channels {c} do not match decoder embed_dim {self.config.embed_dim}"
            )
        if image_pe.dim() == 3:
            image_pe = image_pe.unsqueeze(0).expand(b, -1, -1, -1)
        self._check_finite(image_embedding, "inputs")
        self._check_finite(prompt_tokens, "inputs")

        m = self.config.num_mask_tokens
        output_tokens = torch.cat([self.iou_token.weight, self.mask_tokens.weight], dim=0)
        tokens = torch.cat(
            [output_tokens.unsqueeze(0).expand(b, -1, -1), prompt_tokens], dim=1
        )

        tokens_out, image_out = self.transformer(image_embedding, image_pe, tokens)
        self._check_finite(tokens_out, "transformer")

        upscaled = self.upscale_conv2(
            F.gelu(self.upscale_norm(self.upscale_conv1(image_out)))
        )
        upscaled = F.gelu(upscaled)
        self._check_finite(upscaled, "upscaling")

        hyper = torch.stack(
            [self.mask_mlps[i](tokens_out[:, 1 + i]) for i in range(m)], dim=1
        )  # B x M x C/8
        masks = (hyper @ upscaled.flatten(2)).reshape(b, m, h * 4, w * 4)
        self._check_finite(masks, "mask_head")

        iou_pred = self.iou_head(tokens_out[:, 0])
        self._check_finite(iou_pred, "iou_head")
        return masks, iou_pred

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_decoder(config: DecoderConfig) -> MaskDecoder:
    """Build a decoder with deterministic, seed-reproducible parameters."""
    return MaskDecoder(config)


def decode(
    embedding_grid: np.ndarray,
    prompt_tokens: torch.Tensor,
    decoder: MaskDecoder,
    image_pe: torch.Tensor,
) -> MaskLogits:
    """Single-sample decode; in single-mask mode returns the one mask, in
    SAM-compatible multi-token mode the mask with the highest predicted IoU."""
    emb = torch.from_numpy(np.ascontiguousarray(embedding_grid, dtype=np.float32))
    with torch.no_grad():
        masks, iou = decoder(
            emb.unsqueeze(0),
            image_pe.to(emb.dtype),
            prompt_tokens.to(emb.dtype).unsqueeze(0),
        )
    pick = 0 if decoder.config.num_mask_tokens == 1 else int(iou[0].argmax())
    return MaskLogits(masks[0, pick].numpy(), float(iou[0, pick]))


def upsample_logits(logits: MaskLogits | np.ndarray, original_size: tuple[int, int]) -> np.ndarray:
    """Map a logit grid back to original resolution.

    Fixed order: bilinear to the encoder input space (4x the grid side), then
    bilinear to ``original_size``.  Equal sizes short-circuit to the identity.
    """
    grid = logits.grid if isinstance(logits, MaskLogits) else logits
    h, w = original_size
    if h < 1 or w < 1:
        raise ValidationError(f"original_size must be positive, got {original_size}")
    if grid.shape == (h, w):
        return np.array(grid, dtype=np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float32))[None, None]
    encoder_space = (grid.shape[0] * MASK_DOWNSCALE, grid.shape[1] * MASK_DOWNSCALE)
    t = F.interpolate(t, size=encoder_space, mode="bilinear", align_corners=False)
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return t[0, 0].numpy()


def binarize(grid: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Strictly-greater-than threshold on logits (0.0 equals p=0.5)."""
    return (grid > threshold).astype(np.uint8)


def save_checkpoint(
    path: str | Path,
    decoder: MaskDecoder,
    metadata: dict | None = None,
) -> Path:
    """Write decoder config + named parameter blobs with a trailing CRC32."""
    parts: list[bytes] = []

    def _chunk(data: bytes) -> None:
        parts.append(struct.pack("<I", len(data)) + data)

    _chunk(json.dumps(asdict(decoder.config), sort_keys=True).encode("utf-8"))
    _chunk(json.dumps(metadata or {}, sort_keys=True).encode("utf-8"))

    named = sorted(decoder.state_dict().items())
    parts.append(struct.pack("<I", len(named)))
    for name, tensor in named:
        name_bytes = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<I", len(name_bytes)) + name_bytes)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())

    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    blob = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + body + struct.pack("<I", crc)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[MaskDecoder, dict]:
    """Rebuild a decoder from a checkpoint, validating shapes by name."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}", producer="train")
    blob = path.read_bytes()
    head = len(CHECKPOINT_MAGIC) + 2
    if len(blob) < head + 4 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CacheCorruptError(f"{path}: not a checkpoint file (bad magic or truncated)")
    (version,) = struct.unpack_from("<H", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CacheCorruptError(f"{path}: unsupported checkpoint version {version}")
    body, (stored_crc,) = blob[head:-4], struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CacheCorruptError(f"{path}: checkpoint CRC32 mismatch (corrupt or truncated)")

    off = 0

    def _take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise CacheCorruptError(f"{path}: checkpoint body ends early")
        chunk = body[off : off + n]
        off += n
        return chunk

    def _chunk() -> bytes:
        (n,) = struct.unpack("<I", _take(4))
        return _take(n)

    config = DecoderConfig(**json.loads(_chunk().decode("utf-8")))
    metadata = json.loads(_chunk().decode("utf-8"))
    decoder = MaskDecoder(config)
    expected = {name: tuple(t.shape) for name, t in decoder.state_dict().items()}

    (n_params,) = struct.unpack("<I", _take(4))
    state: dict[str, torch.Tensor] = {}
    for _ in range(n_params):
        name = _chunk().decode("utf-8")
        (ndim,) = struct.unpack("<I", _take(4))
        shape = struct.unpack(f"<{ndim}I", _take(4 * ndim))
        values = np.frombuffer(_take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        if name not in expected:
            raise CacheCorruptError(f"{path}: unknown parameter {name!r} in checkpoint")
        if tuple(shape) != expected[name]:
            raise CacheCorruptError(
                f"{path}: parameter {name!r} has shape {tuple(shape)}, expected {expected[name]}"
            )
        state[name] = torch.from_numpy(values.copy())
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CacheCorruptError(f"{path}: checkpoint missing parameters: {missing[:5]}")
    decoder.load_state_dict(state)
    return decoder, metadata
