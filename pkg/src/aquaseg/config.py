"""Structured pipeline configuration: one YAML file with per-stage sections.

Every field is validated at load and unknown keys are rejected by name, so a
typo fails fast instead of silently taking a default.  CLI flags override
config keys one-to-one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dataset import (
    DEFAULT_CHANNEL_THRESHOLD,
    DEFAULT_CLASS_MAP,
    DEFAULT_MIN_PIXELS,
    DEFAULT_PIXEL_MEAN,
    DEFAULT_PIXEL_STD,
    ClassSpec,
    validate_class_map,
)
from .decoder import DecoderConfig
from .encoder import EncoderSpec
from .errors import ConfigError
from .training import TrainConfig


@dataclass
class DatasetSection:
    root: str = "data/synth"
    min_pixels: int = DEFAULT_MIN_PIXELS
    channel_threshold: int = DEFAULT_CHANNEL_THRESHOLD
    exclusion_scope: str = "mask"
    classes: list[ClassSpec] = field(default_factory=lambda: list(DEFAULT_CLASS_MAP))


@dataclass
class SplitSection:
    ratio: float = 0.8
    seed: int = 17


@dataclass
class EncoderSection:
    kind: str = "toy"
    embed_dim: int = 32
    input_side: int = 256
    seed: int = 3
    external_dir: str | None = None
    mean: tuple[float, float, float] = DEFAULT_PIXEL_MEAN
    std: tuple[float, float, float] = DEFAULT_PIXEL_STD

    def to_spec(self) -> EncoderSpec:
        return EncoderSpec(self.kind, self.embed_dim, self.input_side, self.seed)


@dataclass
class PromptSection:
    max_offset: int = 20
    outward_only: bool = True
    num_frequencies: int | None = None
    seed: int = 5
    scale: float = 1.0


@dataclass
class DecoderSection:
    num_heads: int | None = None
    mlp_width: int | None = None
    num_mask_tokens: int = 1
    seed: int = 7

    def to_config(self, embed_dim: int) -> DecoderConfig:
        heads = self.num_heads if self.num_heads is not None else (8 if embed_dim >= 128 else 4)
        width = self.mlp_width if self.mlp_width is not None else 8 * embed_dim
        return DecoderConfig(embed_dim, heads, width, self.num_mask_tokens, self.seed)


@dataclass
class TrainSection:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 11
    checkpoint_every: int = 100
    dice_eps: float = 1.0
    holdout_fraction: float = 0.1
    iou_loss_weight: float = 0.0

    def to_config(self, prompt: PromptSection) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            dice_eps=self.dice_eps,
            max_offset=prompt.max_offset,
            outward_only=prompt.outward_only,
            holdout_fraction=self.holdout_fraction,
            iou_loss_weight=self.iou_loss_weight,
        )


@dataclass
class EvalSection:
    iou_mode: str = "foreground"
    checkpoint: str = "auto"  # auto | final | best | explicit path


@dataclass
class ReportSection:
    baseline_csv: str | None = None
    formats: list[str] = field(default_factory=lambda: ["csv", "markdown"])


@dataclass
class SynthSection:
    n_images: int = 10
    seed: int = 23
    canvas: tuple[int, int] = (256, 256)


@dataclass
class OutputSection:
    run_dir: str = "runs/dev"


@dataclass
class PipelineConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    report: ReportSection = field(default_factory=ReportSection)
    synth: SynthSection = field(default_factory=SynthSection)
    output: OutputSection = field(default_factory=OutputSection)


def _expect(d: Any, context: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {context!r} must be a mapping, got {type(d).__name__}")
    return dict(d)


def _reject_unknown(d: dict, context: str) -> None:
    if d:
        key = sorted(d)[0]
        raise ConfigError(f"unknown config key {context}.{key}")


def _take(d: dict, key: str, default: Any, types: tuple[type, ...], context: str) -> Any:
    if key not in d:
        return default
    value = d.pop(key)
    if value is None and default is None:
        return None
    if bool in types and not isinstance(value, bool) and isinstance(value, int):
        raise ConfigError(f"{context}.{key}: expected a boolean, got {value!r}")
    if float in types and isinstance(value, str):
        # YAML 1.1 reads exponent forms like `1e-5` or `1.0e30` as strings
        try:
            value = float(value)
        except ValueError:
            pass
    if not isinstance(value, types) or (isinstance(value, bool) and bool not in types):
        raise ConfigError(
            f"{context}.{key}: expected {'/'.join(t.__name__ for t in types)}, got {value!r}"
        )
    return value


def _parse_classes(raw: Any) -> list[ClassSpec]:
    if raw is None:
        return list(DEFAULT_CLASS_MAP)
    if not isinstance(raw, list):
        raise ConfigError("dataset.classes must be a list of {code, name, color} entries")
    specs = []
    for i, entry in enumerate(raw):
        entry = _expect(entry, f"dataset.classes[{i}]")
        code = _take(entry, "code", None, (str,), f"dataset.classes[{i}]")
        name = _take(entry, "name", None, (str,), f"dataset.classes[{i}]")
        color = _take(entry, "color", None, (list,), f"dataset.classes[{i}]")
        _reject_unknown(entry, f"dataset.classes[{i}]")
        if code is None or name is None or color is None or len(color) != 3:
            raise ConfigError(
                f"dataset.classes[{i}]: each class needs code, name, and a 3-element color"
            )
        specs.append(ClassSpec(code, name, tuple(int(v) for v in color)))
    validate_class_map(specs)
    return specs


def _parse_triple(raw: Any, default: tuple, context: str) -> tuple:
    if raw is None:
        return default
    if not isinstance(raw, list) or len(raw) != 3:
        raise ConfigError(f"{context}: expected a 3-element list, got {raw!r}")
    return tuple(float(v) for v in raw)


def config_from_dict(doc: dict) -> PipelineConfig:
    doc = _expect(doc, "<root>")
    cfg = PipelineConfig()

    d = _expect(doc.pop("dataset", None), "dataset")
    cfg.dataset = DatasetSection(
        root=_take(d, "root", cfg.dataset.root, (str,), "dataset"),
        min_pixels=_take(d, "min_pixels", cfg.dataset.min_pixels, (int,), "dataset"),
        channel_threshold=_take(
            d, "channel_threshold", cfg.dataset.channel_threshold, (int,), "dataset"
        ),
        exclusion_scope=_take(d, "exclusion_scope", cfg.dataset.exclusion_scope, (str,), "dataset"),
        classes=_parse_classes(d.pop("classes", None)),
    )
    _reject_unknown(d, "dataset")
    if cfg.dataset.exclusion_scope not in ("mask", "component"):
        raise ConfigError(
            f"dataset.exclusion_scope must be 'mask' or 'component', got {cfg.dataset.exclusion_scope!r}"
        )
    if not 0 <= cfg.dataset.channel_threshold <= 255:
        raise ConfigError("dataset.channel_threshold must be in [0, 255]")
    if cfg.dataset.min_pixels < 0:
        raise ConfigError("dataset.min_pixels must be >= 0")

    d = _expect(doc.pop("split", None), "split")
    cfg.split = SplitSection(
        ratio=float(_take(d, "ratio", cfg.split.ratio, (int, float), "split")),
        seed=_take(d, "seed", cfg.split.seed, (int,), "split"),
    )
    _reject_unknown(d, "split")
    if not 0 < cfg.split.ratio < 1:
        raise ConfigError(f"split.ratio must be in (0, 1), got {cfg.split.ratio}")

    d = _expect(doc.pop("encoder", None), "encoder")
    kind = _take(d, "kind", "toy", (str,), "encoder")
    if kind not in ("toy", "external"):
        raise ConfigError(f"encoder.kind must be 'toy' or 'external', got {kind!r}")
    norm = _expect(d.pop("normalization", None), "encoder.normalization")
    mean = _parse_triple(norm.pop("mean", None), DEFAULT_PIXEL_MEAN, "encoder.normalization.mean")
    std = _parse_triple(norm.pop("std", None), DEFAULT_PIXEL_STD, "encoder.normalization.std")
    _reject_unknown(norm, "encoder.normalization")
    cfg.encoder = EncoderSection(
        kind=kind,
        embed_dim=_take(d, "embed_dim", 32 if kind == "toy" else 256, (int,), "encoder"),
        input_side=_take(d, "input_side", 256 if kind == "toy" else 1024, (int,), "encoder"),
        seed=_take(d, "seed", cfg.encoder.seed, (int,), "encoder"),
        external_dir=_take(d, "external_dir", None, (str,), "encoder"),
        mean=mean,
        std=std,
    )
    _reject_unknown(d, "encoder")

    d = _expect(doc.pop("prompt", None), "prompt")
    cfg.prompt = PromptSection(
        max_offset=_take(d, "max_offset", cfg.prompt.max_offset, (int,), "prompt"),
        outward_only=_take(d, "outward_only", cfg.prompt.outward_only, (bool,), "prompt"),
        num_frequencies=_take(d, "num_frequencies", None, (int,), "prompt"),
        seed=_take(d, "seed", cfg.prompt.seed, (int,), "prompt"),
        scale=float(_take(d, "scale", cfg.prompt.scale, (int, float), "prompt")),
    )
    _reject_unknown(d, "prompt")
    if cfg.prompt.max_offset < 0:
        raise ConfigError("prompt.max_offset must be >= 0")

    d = _expect(doc.pop("decoder", None), "decoder")
    embed_dim = _take(d, "embed_dim", None, (int,), "decoder")
    if embed_dim is not None and embed_dim != cfg.encoder.embed_dim:
        raise ConfigError(
            f"decoder.embed_dim {embed_dim} must match encoder.embed_dim {cfg.encoder.embed_dim}"
        )
    cfg.decoder = DecoderSection(
        num_heads=_take(d, "num_heads", None, (int,), "decoder"),
        mlp_width=_take(d, "mlp_width", None, (int,), "decoder"),
        num_mask_tokens=_take(d, "num_mask_tokens", 1, (int,), "decoder"),
        seed=_take(d, "seed", cfg.decoder.seed, (int,), "decoder"),
    )
    _reject_unknown(d, "decoder")

    d = _expect(doc.pop("train", None), "train")
    cfg.train = TrainSection(
        learning_rate=float(_take(d, "learning_rate", cfg.train.learning_rate, (int, float), "train")),
        beta1=float(_take(d, "beta1", cfg.train.beta1, (int, float), "train")),
        beta2=float(_take(d, "beta2", cfg.train.beta2, (int, float), "train")),
        adam_eps=float(_take(d, "adam_eps", cfg.train.adam_eps, (int, float), "train")),
        batch_size=_take(d, "batch_size", cfg.train.batch_size, (int,), "train"),
        max_epochs=_take(d, "max_epochs", cfg.train.max_epochs, (int,), "train"),
        max_steps=_take(d, "max_steps", None, (int,), "train"),
        seed=_take(d, "seed", cfg.train.seed, (int,), "train"),
        checkpoint_every=_take(d, "checkpoint_every", cfg.train.checkpoint_every, (int,), "train"),
        dice_eps=float(_take(d, "dice_eps", cfg.train.dice_eps, (int, float), "train")),
        holdout_fraction=float(
            _take(d, "holdout_fraction", cfg.train.holdout_fraction, (int, float), "train")
        ),
        iou_loss_weight=float(
            _take(d, "iou_loss_weight", cfg.train.iou_loss_weight, (int, float), "train")
        ),
    )
    _reject_unknown(d, "train")

    d = _expect(doc.pop("eval", None), "eval")
    cfg.eval = EvalSection(
        iou_mode=_take(d, "iou_mode", cfg.eval.iou_mode, (str,), "eval"),
        checkpoint=_take(d, "checkpoint", cfg.eval.checkpoint, (str,), "eval"),
    )
    _reject_unknown(d, "eval")
    if cfg.eval.iou_mode not in ("foreground", "macro"):
        raise ConfigError(f"eval.iou_mode must be 'foreground' or 'macro', got {cfg.eval.iou_mode!r}")

    d = _expect(doc.pop("report", None), "report")
    formats = _take(d, "formats", None, (list,), "report")
    cfg.report = ReportSection(
        baseline_csv=_take(d, "baseline_csv", None, (str,), "report"),
        formats=formats if formats is not None else ["csv", "markdown"],
    )
    _reject_unknown(d, "report")
    for f in cfg.report.formats:
        if f not in ("csv", "markdown"):
            raise ConfigError(f"report.formats entries must be 'csv' or 'markdown', got {f!r}")

    d = _expect(doc.pop("synth", None), "synth")
    canvas = _take(d, "canvas", None, (list,), "synth")
    if canvas is not None and len(canvas) != 2:
        raise ConfigError(f"synth.canvas must be [height, width], got {canvas!r}")
    cfg.synth = SynthSection(
        n_images=_take(d, "n_images", cfg.synth.n_images, (int,), "synth"),
        seed=_take(d, "seed", cfg.synth.seed, (int,), "synth"),
        canvas=tuple(int(v) for v in canvas) if canvas is not None else (256, 256),
    )
    _reject_unknown(d, "synth")

    d = _expect(doc.pop("output", None), "output")
    cfg.output = OutputSection(run_dir=_take(d, "run_dir", cfg.output.run_dir, (str,), "output"))
    _reject_unknown(d, "output")

    _reject_unknown(doc, "<root>")

    # Cross-section checks surface early, before any stage runs.
    cfg.encoder.to_spec()
    cfg.decoder.to_config(cfg.encoder.embed_dim)
    cfg.train.to_config(cfg.prompt)
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "dataset": {
            "root": cfg.dataset.root,
            "min_pixels": cfg.dataset.min_pixels,
            "channel_threshold": cfg.dataset.channel_threshold,
            "exclusion_scope": cfg.dataset.exclusion_scope,
            "classes": [
                {"code": c.code, "name": c.name, "color": list(c.color)}
                for c in cfg.dataset.classes
            ],
        },
        "split": {"ratio": cfg.split.ratio, "seed": cfg.split.seed},
        "encoder": {
            "kind": cfg.encoder.kind,
            "embed_dim": cfg.encoder.embed_dim,
            "input_side": cfg.encoder.input_side,
            "seed": cfg.encoder.seed,
            "external_dir": cfg.encoder.external_dir,
            "normalization": {"mean": list(cfg.encoder.mean), "std": list(cfg.encoder.std)},
        },
        "prompt": {
            "max_offset": cfg.prompt.max_offset,
            "outward_only": cfg.prompt.outward_only,
            "num_frequencies": cfg.prompt.num_frequencies,
            "seed": cfg.prompt.seed,
            "scale": cfg.prompt.scale,
        },
        "decoder": {
            "num_heads": cfg.decoder.num_heads,
            "mlp_width": cfg.decoder.mlp_width,
            "num_mask_tokens": cfg.decoder.num_mask_tokens,
            "seed": cfg.decoder.seed,
        },
        "train": {
            "learning_rate": cfg.train.learning_rate,
            "beta1": cfg.train.beta1,
            "beta2": cfg.train.beta2,
            "adam_eps": cfg.train.adam_eps,
            "batch_size": cfg.train.batch_size,
            "max_epochs": cfg.train.max_epochs,
            "max_steps": cfg.train.max_steps,
            "seed": cfg.train.seed,
            "checkpoint_every": cfg.train.checkpoint_every,
            "dice_eps": cfg.train.dice_eps,
            "holdout_fraction": cfg.train.holdout_fraction,
            "iou_loss_weight": cfg.train.iou_loss_weight,
        },
        "eval": {"iou_mode": cfg.eval.iou_mode, "checkpoint": cfg.eval.checkpoint},
        "report": {"baseline_csv": cfg.report.baseline_csv, "formats": list(cfg.report.formats)},
        "synth": {
            "n_images": cfg.synth.n_images,
            "seed": cfg.synth.seed,
            "canvas": list(cfg.synth.canvas),
        },
        "output": {"run_dir": cfg.output.run_dir},
    }


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(doc or {})


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
