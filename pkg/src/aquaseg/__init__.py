"""Box-prompted underwater foreground segmentation with a fine-tunable
SAM-style mask decoder over frozen, cached image embeddings."""

__version__ = "0.1.0"

from .dataset import (
    DEFAULT_CLASS_MAP,
    BinaryTarget,
    ClassSpec,
    ImageRecord,
    extract_targets,
    parse_color_mask,
    split_dataset,
)
from .decoder import DecoderConfig, MaskDecoder, MaskLogits, binarize, decode, upsample_logits
from .encoder import EncoderSpec, ImageEmbedding, ToyImageEncoder, encode_image
from .losses import ce_loss, dice_loss, total_loss
from .metrics import MetricsRow, dsc, iou, relative_improvement, render_report
from .pipeline import SegPipeline, build_pipeline, parameter_partition
from .prompts import BoundingBox, BoxPromptEncoder, perturb_box, tight_box
from .training import AdamState, TrainConfig, adam_step, train

__all__ = [
    "DEFAULT_CLASS_MAP",
    "AdamState",
    "BinaryTarget",
    "BoundingBox",
    "BoxPromptEncoder",
    "ClassSpec",
    "DecoderConfig",
    "EncoderSpec",
    "ImageEmbedding",
    "ImageRecord",
    "MaskDecoder",
    "MaskLogits",
    "MetricsRow",
    "SegPipeline",
    "ToyImageEncoder",
    "TrainConfig",
    "adam_step",
    "binarize",
    "build_pipeline",
    "ce_loss",
    "decode",
    "dice_loss",
    "dsc",
    "encode_image",
    "extract_targets",
    "iou",
    "parameter_partition",
    "parse_color_mask",
    "perturb_box",
    "relative_improvement",
    "render_report",
    "split_dataset",
    "tight_box",
    "total_loss",
    "train",
    "upsample_logits",
]
