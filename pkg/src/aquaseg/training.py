"""Fine-tune the mask decoder on cached embeddings and perturbed box prompts.

Each step samples a batch of targets, derives tight boxes from their resized
ground-truth masks, perturbs the boxes, decodes, and Adam-updates only the
trainable partition under the unweighted Dice + cross-entropy loss.  The
trajectory is a pure function of (data, config, seed).
"""

from __future__ import annotations

import csv
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .decoder import binarize, save_checkpoint
from .embed_cache import EmbeddingReader
from .errors import DivergenceError, MissingArtifactError, ValidationError
from .losses import total_loss
from .metrics import dsc
from .pipeline import SegPipeline, parameter_partition
from .prompts import perturb_box, tight_box

Key = tuple[str, str]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    checkpoint_every: int = 100
    dice_eps: float = 1.0
    max_offset: int = 20
    outward_only: bool = True
    holdout_fraction: float = 0.1
    iou_loss_weight: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValidationError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not 0 <= self.holdout_fraction < 1:
            raise ValidationError(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            0,
            {k: torch.zeros_like(p) for k, p in params.items()},
            {k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    Missing gradients count as zero; non-finite gradients abort the step.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(params[name])
        elif not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r} at step {t}")
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        update = (m / bias1) / ((v / bias2).sqrt() + eps)
        with torch.no_grad():
            params[name].add_(update, alpha=-learning_rate)


@dataclass
class HistoryRow:
    step: int
    dice: float
    ce: float
    total: float


@dataclass
class TrainResult:
    pipeline: SegPipeline
    history: list[HistoryRow]
    final_path: Path | None
    best_path: Path | None
    best_step: int | None
    best_holdout_dsc: float | None
    holdout_keys: list[Key]


def write_history_csv(history: list[HistoryRow], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "dice", "ce", "total"])
        for row in history:
            writer.writerow([row.step, repr(row.dice), repr(row.ce), repr(row.total)])


def _holdout_dsc(
    keys: list[Key],
    mask_loader: Callable[[Key], np.ndarray],
    embeddings: EmbeddingReader,
    pipeline: SegPipeline,
) -> float:
    """Mean DSC over holdout targets with unperturbed boxes, at encoder scale."""
    scores = []
    for key in keys:
        mask = mask_loader(key)
        logits = pipeline.predict_logits(embeddings.grid(key[0]), tight_box(mask))
        side = pipeline.input_side
        up = F.interpolate(
            torch.from_numpy(logits.grid)[None, None], size=(side, side),
            mode="bilinear", align_corners=False,
        )[0, 0].numpy()
        scores.append(dsc(binarize(up), mask))
    return float(np.mean(scores))


def train(
    train_keys: list[Key],
    mask_loader: Callable[[Key], np.ndarray],
    embeddings: EmbeddingReader,
    pipeline: SegPipeline,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Run the fine-tuning loop.

    ``mask_loader`` returns the encoder-scale (side x side) binary mask for a
    (image_id, class_code) key.  Checkpoints are written every
    ``checkpoint_every`` steps and at the end; a non-finite loss or gradient
    aborts with the last good parameters saved as ``last_good.ckpt``.
    """
    if not train_keys:
        raise ValidationError("no training targets")
    missing = sorted({k[0] for k in train_keys} - set(embeddings.index.entries))
    if missing:
        raise MissingArtifactError(
            f"embeddings missing for {len(missing)} training image(s): "
            f"{', '.join(missing[:10])}", producer="embed",
        )

    # Audits the freeze/train split; freezing itself is enforced by requires_grad.
    _, trainable = parameter_partition(pipeline)
    adam = AdamState.for_params(trainable)
    rng = np.random.default_rng(config.seed)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    keys = sorted(train_keys)
    holdout: list[Key] = []
    if config.holdout_fraction > 0:
        n_holdout = int(round(config.holdout_fraction * len(keys)))
        if n_holdout >= 1 and n_holdout < len(keys):
            order = rng.permutation(len(keys))
            holdout = sorted(keys[i] for i in order[:n_holdout])
            keys = sorted(keys[i] for i in order[n_holdout:])

    side = pipeline.input_side
    decoder = pipeline.decoder
    history: list[HistoryRow] = []
    best_dsc: float | None = None
    best_step: int | None = None
    best_state: dict[str, torch.Tensor] | None = None
    step = 0

    def _save(name: str, extra: dict | None = None) -> Path | None:
        if ckpt_dir is None:
            return None
        meta = {"step": step, "train_config": asdict(config)}
        meta.update(extra or {})
        return save_checkpoint(ckpt_dir / name, decoder, meta)

    def _checkpoint_tick() -> None:
        nonlocal best_dsc, best_step, best_state
        _save(f"step_{step:06d}.ckpt")
        if holdout:
            score = _holdout_dsc(holdout, mask_loader, embeddings, pipeline)
            if best_dsc is None or score > best_dsc:
                best_dsc, best_step = score, step
                best_state = {k: v.detach().clone() for k, v in decoder.state_dict().items()}

    done = False
    for _epoch in range(config.max_epochs):
        if done:
            break
        order = rng.permutation(len(keys))
        for start in range(0, len(keys), config.batch_size):
            batch_keys = [keys[i] for i in order[start : start + config.batch_size]]
            # All sampling randomness for this step is drawn up front.
            offsets = rng.integers(
                -config.max_offset if not config.outward_only else 0,
                config.max_offset + 1,
                size=(len(batch_keys), 4),
            )

            embs, tokens, targets = [], [], []
            for key, draw in zip(batch_keys, offsets):
                mask = mask_loader(key)
                box = tight_box(mask)
                box = perturb_box(
                    box, config.max_offset, (side, side),
                    _FixedDraw(draw), outward_only=config.outward_only,
                )
                embs.append(torch.from_numpy(embeddings.grid(key[0])))
                tokens.append(pipeline.encode_box(box))
                targets.append(torch.from_numpy(mask.astype(np.float32)))

            emb_batch = torch.stack(embs)
            token_batch = torch.stack(tokens)
            target_batch = torch.stack(targets)
            pe = pipeline.dense_pe(emb_batch.shape[2], emb_batch.shape[3])

            step += 1
            try:
                for p in trainable.values():
                    p.grad = None
                masks, iou_pred = decoder(emb_batch, pe, token_batch)
                logits = F.interpolate(
                    masks[:, :1], size=(side, side), mode="bilinear", align_corners=False
                )[:, 0]

                dice_terms, ce_terms, totals = [], [], []
                for i in range(logits.shape[0]):
                    tot, dice, ce = total_loss(logits[i], target_batch[i], config.dice_eps)
                    dice_terms.append(dice)
                    ce_terms.append(ce)
                    totals.append(tot)
                loss = torch.stack(totals).mean()
                if config.iou_loss_weight > 0:
                    with torch.no_grad():
                        pred_bin = (logits > 0).to(logits.dtype)
                        inter = (pred_bin * target_batch).sum(dim=(1, 2))
                        union = pred_bin.sum(dim=(1, 2)) + target_batch.sum(dim=(1, 2)) - inter
                        actual_iou = torch.where(union > 0, inter / union, torch.ones_like(union))
                    loss = loss + config.iou_loss_weight * F.mse_loss(iou_pred[:, 0], actual_iou)

                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at step {step}")
                loss.backward()
                grads = {name: p.grad for name, p in trainable.items()}
                adam_step(
                    trainable, grads, adam,
                    config.learning_rate, config.beta1, config.beta2, config.adam_eps,
                )
            except DivergenceError:
                _save("last_good.ckpt", {"aborted_at_step": step})
                raise

            mean_dice = float(torch.stack(dice_terms).detach().mean())
            mean_ce = float(torch.stack(ce_terms).detach().mean())
            history.append(HistoryRow(step, mean_dice, mean_ce, mean_dice + mean_ce))

            if step % config.checkpoint_every == 0:
                _checkpoint_tick()
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break

    final_path = _save("final.ckpt")
    best_path = None
    if best_state is not None and ckpt_dir is not None:
        current = {k: v.detach().clone() for k, v in decoder.state_dict().items()}
        decoder.load_state_dict(best_state)
        best_path = save_checkpoint(
            ckpt_dir / "best.ckpt", decoder,
            {"step": best_step, "holdout_dsc": best_dsc, "train_config": asdict(config)},
        )
        decoder.load_state_dict(current)
    if ckpt_dir is not None:
        write_history_csv(history, ckpt_dir / "loss_history.csv")
    return TrainResult(pipeline, history, final_path, best_path, best_step, best_dsc, holdout)


class _FixedDraw:
    """Adapter feeding pre-drawn perturbation offsets to perturb_box."""

    def __init__(self, values: np.ndarray):
        self._values = np.asarray(values)

    def integers(self, low: int, high: int, size: int = 4) -> np.ndarray:
        clipped = np.clip(self._values, low, high - 1)
        return clipped[:size]
