"""Assembled pipeline: frozen encoder + frozen prompt encoder + trainable decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .decoder import DecoderConfig, MaskDecoder, MaskLogits, decode
from .encoder import EncoderSpec, ToyImageEncoder, build_toy_encoder
from .errors import ValidationError
from .prompts import BoundingBox, BoxPromptEncoder


@dataclass
class SegPipeline:
    """Everything needed to turn (cached embedding, box) into mask logits."""

    encoder_spec: EncoderSpec
    encoder: ToyImageEncoder | None
    prompt_encoder: BoxPromptEncoder
    decoder: MaskDecoder

    def __post_init__(self) -> None:
        if self.prompt_encoder.embed_dim != self.decoder.config.embed_dim:
            raise ValidationError(
                f"prompt encoder width {self.prompt_encoder.embed_dim} does not match "
                f"decoder embed_dim {self.decoder.config.embed_dim}"
            )
        if self.encoder_spec.embed_dim != self.decoder.config.embed_dim:
            raise ValidationError(
                f"encoder embed_dim {self.encoder_spec.embed_dim} does not match "
                f"decoder embed_dim {self.decoder.config.embed_dim}"
            )
        self._pe_cache: dict[tuple[int, int], torch.Tensor] = {}

    @property
    def input_side(self) -> int:
        return self.encoder_spec.input_side

    def dense_pe(self, height: int, width: int) -> torch.Tensor:
        key = (height, width)
        if key not in self._pe_cache:
            with torch.no_grad():
                self._pe_cache[key] = self.prompt_encoder.dense_grid(height, width)
        return self._pe_cache[key]

    def encode_box(self, box: BoundingBox) -> torch.Tensor:
        with torch.no_grad():
            return self.prompt_encoder.encode_box(box, self.input_side)

    def predict_logits(self, embedding_grid: np.ndarray, box: BoundingBox) -> MaskLogits:
        _, h, w = embedding_grid.shape
        return decode(embedding_grid, self.encode_box(box), self.decoder, self.dense_pe(h, w))


def build_pipeline(
    encoder_spec: EncoderSpec,
    decoder_config: DecoderConfig,
    prompt_seed: int = 0,
    num_frequencies: int | None = None,
    prompt_scale: float = 1.0,
) -> SegPipeline:
    encoder = build_toy_encoder(encoder_spec) if encoder_spec.kind == "toy" else None
    prompt_encoder = BoxPromptEncoder(
        decoder_config.embed_dim,
        num_frequencies=num_frequencies,
        scale=prompt_scale,
        seed=prompt_seed,
    )
    return SegPipeline(encoder_spec, encoder, prompt_encoder, MaskDecoder(decoder_config))


def parameter_partition(
    pipeline: SegPipeline,
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Split all pipeline parameters into (frozen, trainable) by name.

    Frozen is the image encoder plus the prompt encoder (frequency matrix and
    corner embeddings); trainable is exactly the decoder.  The sets must be
    disjoint, exhaustive, and consistent with each parameter's requires_grad
    flag; the trainable set must be nonempty.
    """
    frozen: dict[str, torch.Tensor] = {}
    trainable: dict[str, torch.Tensor] = {}

    components: list[tuple[str, nn.Module, bool]] = [
        ("prompt_encoder", pipeline.prompt_encoder, False),
        ("decoder", pipeline.decoder, True),
    ]
    if pipeline.encoder is not None:
        components.insert(0, ("encoder", pipeline.encoder, False))

    for prefix, module, expect_trainable in components:
        for name, param in module.named_parameters():
            full = f"{prefix}.{name}"
            if param.requires_grad != expect_trainable:
                state = "trainable" if param.requires_grad else "frozen"
                raise ValidationError(
                    f"parameter {full} is {state} but belongs to the "
                    f"{'trainable' if expect_trainable else 'frozen'} partition"
                )
            target = trainable if expect_trainable else frozen
            if full in frozen or full in trainable:
                raise ValidationError(f"parameter {full} assigned twice")
            target[full] = param
    if not trainable:
        raise ValidationError("trainable partition is empty: no decoder parameters found")
    return frozen, trainable


def parameter_bytes(params: dict[str, torch.Tensor]) -> bytes:
    """Concatenated little-endian bytes of parameters in name order, for
    freeze-contract audits."""
    chunks = []
    for name in sorted(params):
        arr = params[name].detach().cpu().numpy()
        chunks.append(name.encode() + b"\x00" + np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)
